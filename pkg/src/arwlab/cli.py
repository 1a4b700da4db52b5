"""Command-line front end: parse a run description, dispatch, emit tables.

One binary, one subcommand per experiment family; no long-running service.
Parsing is deterministic and unknown flags are rejected.  A plain
"key = value" config file can supply defaults; explicit flags win.  Progress
goes to stderr only; stdout carries the table when no --out is given.

Exit codes: 0 success, 1 usage, 2 invariant violation, 3 I/O.  The
environment variable ARW_SEED supplies the default master seed.
"""

import argparse
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .engine import DEFAULT_BUDGET
from .errors import (
    DensityMismatch,
    InvalidSpec,
    StabilizeStatus,
    UsageError,
)
from .experiments import (
    ExperimentSpec,
    ResultTable,
    Row,
    _fmt_float,
    _mean_se,
    _sub_seed,
    run_experiment,
)
from .instructions import InstructionField
from .model import (
    Configuration,
    InitialStateSpec,
    JumpDistribution,
    ModelParams,
    Window,
    sample_initial,
)
from .procedures import (
    block_functions,
    green_function_estimate,
    killed_walk_prob,
    trap_explore,
)
from .validate import run_validate

SUBCOMMANDS = ("validate", "scan", "ring", "dd", "condition", "block", "trap", "oracle")

_REQUIRED = object()


@dataclass
class CliConfig:
    """Fully resolved invocation: subcommand, built spec, output plumbing."""

    subcommand: str
    spec: ExperimentSpec = None
    seed_count: int = 0
    out: str = None
    fmt: str = "csv"
    threads: int = 1
    trace: str = None
    extra: dict = field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- flag value converters (raise ArgumentTypeError so the flag is named) --


def _type_error(msg):
    return argparse.ArgumentTypeError(msg)


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise _type_error("must be a positive integer")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise _type_error("must be >= 0")
    return v


def _pos_float(text):
    v = float(text)
    if not v > 0:
        raise _type_error("must be > 0")
    return v


def _density(text):
    v = float(text)
    if v < 0:
        raise _type_error("density negative")
    return v


def _prob(text):
    v = float(text)
    if not 0 < v < 1:
        raise _type_error("must be strictly between 0 and 1")
    return v


def _int_list(text):
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise _type_error("expected a comma-separated list of integers")


def _float_list(text):
    try:
        return tuple(float(s) for s in text.split(","))
    except ValueError:
        raise _type_error("expected a comma-separated list of numbers")


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise _type_error("expected true or false")


def _init_kind(text):
    if text not in ("poisson", "bernoulli", "floor-bernoulli", "deterministic"):
        raise _type_error("unknown initial-state kind")
    return text


# --- option registry -------------------------------------------------------


@dataclass(frozen=True)
class _Opt:
    name: str                 # long flag without the leading --
    conv: object              # converter, or None for store_true flags
    default: object           # hard default; _REQUIRED means must be given
    help: str
    dest: str = None

    @property
    def attr(self):
        return self.dest or self.name.replace("-", "_")


_OUTPUT_OPTS = (
    _Opt("out", str, None, "write the table to this path instead of stdout"),
    _Opt("format", str, "csv", "table format: csv or json"),
    _Opt("threads", _pos_int, None, "worker pool size (default: machine parallelism)"),
    _Opt("config", str, None, "key = value file supplying defaults"),
    _Opt("trace", str, None, "write per-event JSON lines to this path"),
)

_SEED_OPT = _Opt("seed", int, None, "master seed (default: ARW_SEED or 0)")

_WALK_OPTS = (
    _Opt("dim", _pos_int, 1, "lattice dimension"),
    _Opt("directed", None, False, "totally asymmetric jumps (1d only)"),
    _Opt("bias", _prob, None, "right-step probability for a biased 1d walk"),
)

_OPTIONS = {
    "validate": (
        _Opt("seeds", _nonneg_int, 1000, "number of randomized instances"),
        _Opt("config", str, None, "key = value file supplying defaults"),
    ),
    "scan": _WALK_OPTS + (
        _Opt("lambdas", _float_list, _REQUIRED, "sleep-rate grid"),
        _Opt("zetas", _float_list, _REQUIRED, "density grid"),
        _Opt("sizes", _int_list, _REQUIRED, "box half-width grid"),
        _Opt("init", _init_kind, "poisson", "initial-state law"),
        _Opt("replicas", _pos_int, 100, "replicas per grid point"),
        _Opt("budget", _pos_int, DEFAULT_BUDGET, "toppling budget per replica"),
        _SEED_OPT,
    ) + _OUTPUT_OPTS,
    "ring": (
        _Opt("n", _pos_int, _REQUIRED, "ring length (torus side)"),
        _Opt("zeta", _density, _REQUIRED, "initial density"),
        _Opt("lambda", _pos_float, _REQUIRED, "sleep rate", dest="lam"),
        _Opt("init", _init_kind, "poisson", "initial-state law"),
        _Opt("thresholds", _float_list, (), "toppling-count thresholds k"),
        _Opt("replicas", _pos_int, 100, "independent rings"),
        _Opt("budget", _pos_int, DEFAULT_BUDGET, "toppling budget per ring"),
        _SEED_OPT,
    ) + _OUTPUT_OPTS,
    "dd": _WALK_OPTS + (
        _Opt("sizes", _int_list, _REQUIRED, "box half-widths, one chain each"),
        _Opt("lambda", _pos_float, _REQUIRED, "sleep rate", dest="lam"),
        _Opt("steps", _pos_int, 10_000, "chain length (add-stabilize rounds)"),
        _Opt("budget", _pos_int, DEFAULT_BUDGET, "toppling budget per round"),
        _SEED_OPT,
    ) + _OUTPUT_OPTS,
    "condition": _WALK_OPTS + (
        _Opt("which", str, _REQUIRED, "b, u, or e"),
        _Opt("zeta", _density, _REQUIRED, "initial density"),
        _Opt("lambda", _pos_float, _REQUIRED, "sleep rate", dest="lam"),
        _Opt("init", _init_kind, "poisson", "initial-state law"),
        _Opt("sizes", _int_list, _REQUIRED, "volume radius grid"),
        _Opt("k", _float_list, (), "origin-odometer thresholds (b and u)"),
        _Opt("replicas", _pos_int, 100, "replicas per size"),
        _Opt("budget", _pos_int, DEFAULT_BUDGET, "toppling budget per replica"),
        _SEED_OPT,
    ) + _OUTPUT_OPTS,
    "block": (
        _Opt("half-width", _pos_int, _REQUIRED, "block half-width (>= 2)"),
        _Opt("m-max", _nonneg_int, 200, "particles fed to the block center"),
        _Opt("fields", _pos_int, 50, "independent instruction fields"),
        _Opt("lambda", _pos_float, 1.0, "sleep rate", dest="lam"),
        _Opt("directed", None, False, "totally asymmetric jumps"),
        _Opt("bias", _prob, None, "right-step probability"),
        _Opt("budget", _pos_int, DEFAULT_BUDGET, "toppling budget per field"),
        _SEED_OPT,
    ) + _OUTPUT_OPTS,
    "trap": (
        _Opt("radius", _pos_int, 1000, "half-line window radius"),
        _Opt("particles", _pos_int, 100, "explorations per field"),
        _Opt("zeta", _density, 0.5, "density of the sampled start"),
        _Opt("lambda", _pos_float, 1.0, "sleep rate", dest="lam"),
        _Opt("directed", None, False, "totally asymmetric jumps"),
        _Opt("bias", _prob, None, "right-step probability"),
        _Opt("fields", _pos_int, 20, "independent instruction fields"),
        _SEED_OPT,
    ) + _OUTPUT_OPTS,
    "oracle": _WALK_OPTS + (
        _Opt("which", str, _REQUIRED, "killed or green"),
        _Opt("lambda", _pos_float, 1.0, "killing intensity", dest="lam"),
        _Opt("direction", _float_list, None, "killing half-space normal"),
        _Opt("replicas", _pos_int, 100_000, "independent walks"),
        _Opt("horizon", _pos_int, 100_000, "steps per walk"),
        _SEED_OPT,
    ) + _OUTPUT_OPTS,
}


def _build_parser():
    parser = _Parser(prog="arwlab", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="subcommand", required=True)
    for name, opts in _OPTIONS.items():
        sub = subs.add_parser(name)
        for opt in opts:
            if opt.conv is None:
                sub.add_argument(f"--{opt.name}", dest=opt.attr,
                                 action="store_true", default=None, help=opt.help)
            else:
                sub.add_argument(f"--{opt.name}", dest=opt.attr, type=opt.conv,
                                 default=None, help=opt.help, metavar="V")
    return parser


def _read_config(path):
    conf = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc}")
    for ln, line in enumerate(lines, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise UsageError(f"--config: {path}:{ln}: expected key = value")
        conf[key.strip()] = value.strip()
    return conf


def _resolve(ns, opts):
    """Apply config-file defaults, then hard defaults; flags always win."""
    conf = {}
    if getattr(ns, "config", None):
        conf = _read_config(ns.config)
        known = {opt.name for opt in opts}
        for key in conf:
            if key not in known:
                raise UsageError(f"--config: unknown key {key!r}")
    vals = {}
    for opt in opts:
        raw = getattr(ns, opt.attr)
        if raw is None and opt.name in conf:
            conv = opt.conv or _bool
            try:
                raw = conv(conf[opt.name])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"--config: key {opt.name}: {exc}")
        if raw is None:
            if opt.default is _REQUIRED:
                raise UsageError(f"--{opt.name} is required")
            raw = opt.default
        vals[opt.attr] = raw
    if "seed" in vals and vals["seed"] is None:
        env = os.environ.get("ARW_SEED", "")
        try:
            vals["seed"] = int(env) if env else 0
        except ValueError:
            raise UsageError(f"ARW_SEED must be an integer, got {env!r}")
    if "threads" in vals and vals["threads"] is None:
        vals["threads"] = os.cpu_count() or 1
    if vals.get("format") not in (None, "csv", "json"):
        raise UsageError(f"--format: unknown format {vals['format']!r}")
    return vals


def _jumps_of(dim, directed, bias):
    if directed and bias is not None:
        raise UsageError("--directed and --bias are mutually exclusive")
    if directed:
        if dim != 1:
            raise UsageError("--directed requires --dim 1")
        return JumpDistribution.directed_1d()
    if bias is not None:
        if dim != 1:
            raise UsageError("--bias requires --dim 1")
        return JumpDistribution(1, (bias, 1.0 - bias))
    return JumpDistribution.symmetric(dim)


_CONDITION_KINDS = {"b": "ConditionB", "u": "ConditionU", "e": "ConditionE"}


def _build_spec(sub, v):
    if sub == "scan":
        return ExperimentSpec(
            "PhaseScan", v["dim"], _jumps_of(v["dim"], v["directed"], v["bias"]),
            v["lambdas"][0], InitialStateSpec(v["init"], v["zetas"][0]),
            v["sizes"], replicas=v["replicas"], budget=v["budget"],
            master_seed=v["seed"], lam_grid=v["lambdas"], zeta_grid=v["zetas"],
        )
    if sub == "ring":
        return ExperimentSpec(
            "RingFixedEnergy", 1, JumpDistribution.symmetric(1), v["lam"],
            InitialStateSpec(v["init"], v["zeta"]), (v["n"],),
            k_grid=v["thresholds"], replicas=v["replicas"], budget=v["budget"],
            master_seed=v["seed"],
        )
    if sub == "dd":
        return ExperimentSpec(
            "DrivenDissipative", v["dim"],
            _jumps_of(v["dim"], v["directed"], v["bias"]), v["lam"],
            InitialStateSpec("deterministic", 0.0), v["sizes"],
            replicas=v["steps"], budget=v["budget"], master_seed=v["seed"],
        )
    if sub == "condition":
        kind = _CONDITION_KINDS.get(v["which"])
        if kind is None:
            raise UsageError(f"--which: expected b, u, or e, got {v['which']!r}")
        if kind in ("ConditionB", "ConditionU") and not v["k"]:
            raise UsageError("--k is required for --which b and --which u")
        return ExperimentSpec(
            kind, v["dim"], _jumps_of(v["dim"], v["directed"], v["bias"]),
            v["lam"], InitialStateSpec(v["init"], v["zeta"]), v["sizes"],
            k_grid=v["k"], replicas=v["replicas"], budget=v["budget"],
            master_seed=v["seed"],
        )
    return None


def parse_args(argv):
    """Parse argv into a CliConfig; raises UsageError naming the bad flag."""
    ns = _build_parser().parse_args(argv)
    sub = ns.subcommand
    vals = _resolve(ns, _OPTIONS[sub])
    cfg = CliConfig(sub)
    if sub == "validate":
        cfg.seed_count = vals["seeds"]
        return cfg
    cfg.out = vals["out"]
    cfg.fmt = vals["format"]
    cfg.threads = vals["threads"]
    cfg.trace = vals["trace"]
    cfg.extra = vals
    try:
        cfg.spec = _build_spec(sub, vals)
    except InvalidSpec as exc:
        raise UsageError(str(exc))
    return cfg


# --- table-producing utility subcommands -----------------------------------


def _block_table(v):
    jumps = _jumps_of(1, v["directed"], v["bias"])
    params = ModelParams(v["lam"])
    width, m_max, n_fields = v["half_width"], v["m_max"], v["fields"]
    per_field = []
    censored = 0
    for i in range(n_fields):
        fld = InstructionField(_sub_seed(v["seed"], i), params, jumps)
        blk = Configuration.empty(Window((width,)))
        out = block_functions(width, blk, fld, m_max, budget=v["budget"])
        if out.status is not StabilizeStatus.STABLE or len(out.totals) != m_max + 1:
            censored += 1
            continue
        per_field.append((out.left_exits, out.right_exits, out.sleepers))
    if not per_field:
        raise InvalidSpec("every field exhausted the block budget")
    header = {
        "kind": "Block", "d": "1", "lambda": _fmt_float(v["lam"]),
        "jumps": ",".join(_fmt_float(w) for w in jumps.weights),
        "half_width": str(width), "m_max": str(m_max),
        "fields": str(n_fields), "budget": str(v["budget"]),
        "master_seed": str(v["seed"]),
    }
    stacks = [np.stack([f[j] for f in per_field]) for j in range(3)]
    rows = []
    for m in range(m_max + 1):
        for name, stack in zip(("L_mean", "R_mean", "S_mean"), stacks):
            est, se = _mean_se(stack[:, m].tolist())
            rows.append(Row("Block", 1, v["lam"], None, width, float(m),
                            name, est, se, len(per_field), censored, v["seed"]))
    return ResultTable(header, rows)


def _trap_table(v):
    jumps = _jumps_of(1, v["directed"], v["bias"])
    params = ModelParams(v["lam"])
    dom = Window((v["radius"],))
    gaps = []
    trap_count = escape_count = failed = 0
    for i in range(v["fields"]):
        run_seed = _sub_seed(v["seed"], i)
        cfg = sample_initial(InitialStateSpec("poisson", v["zeta"]), dom,
                             _sub_seed(run_seed, 1))
        origin = dom.origin_flat
        if cfg.grid[origin]:
            cfg.grid[origin] = 0
            cfg.total = cfg.recount()
        fld = InstructionField(_sub_seed(run_seed, 2), params, jumps)
        res = trap_explore(cfg, v["particles"], fld)
        if res.reason is not None:
            failed += 1
            continue
        gaps.extend(res.interdistances.tolist())
        trap_count += len(res.traps)
        escape_count += res.escapes
    header = {
        "kind": "Trap", "d": "1", "lambda": _fmt_float(v["lam"]),
        "jumps": ",".join(_fmt_float(w) for w in jumps.weights),
        "radius": str(v["radius"]), "particles": str(v["particles"]),
        "zeta": _fmt_float(v["zeta"]), "fields": str(v["fields"]),
        "master_seed": str(v["seed"]),
    }
    est, se = _mean_se(gaps)
    rows = [
        Row("Trap", 1, v["lam"], v["zeta"], v["radius"], None,
            "interdistance_mean", est, se, len(gaps), failed, v["seed"]),
        Row("Trap", 1, v["lam"], v["zeta"], v["radius"], None,
            "trap_count", float(trap_count), None, v["fields"], failed, v["seed"]),
        Row("Trap", 1, v["lam"], v["zeta"], v["radius"], None,
            "escape_count", float(escape_count), None, v["fields"], failed, v["seed"]),
    ]
    return ResultTable(header, rows)


def _oracle_table(v):
    jumps = _jumps_of(v["dim"], v["directed"], v["bias"])
    header = {
        "kind": "Oracle", "which": v["which"], "d": str(v["dim"]),
        "lambda": _fmt_float(v["lam"]),
        "jumps": ",".join(_fmt_float(w) for w in jumps.weights),
        "replicas": str(v["replicas"]), "horizon": str(v["horizon"]),
        "master_seed": str(v["seed"]),
    }
    if v["which"] == "killed":
        direction = v["direction"] or (1.0,) + (0.0,) * (v["dim"] - 1)
        header["direction"] = ",".join(_fmt_float(x) for x in direction)
        est = killed_walk_prob(jumps, direction, v["lam"],
                               replicas=v["replicas"], horizon=v["horizon"],
                               seed=v["seed"])
        statistic = "killed_walk_prob"
    elif v["which"] == "green":
        est = green_function_estimate(jumps, replicas=v["replicas"],
                                      horizon=v["horizon"], seed=v["seed"])
        statistic = "green_function"
    else:
        raise UsageError(f"--which: expected killed or green, got {v['which']!r}")
    rows = [Row("Oracle", v["dim"], v["lam"], None, v["horizon"], None,
                statistic, est.estimate, est.stderr, est.replicas, 0, v["seed"])]
    return ResultTable(header, rows)


# --- dispatch ---------------------------------------------------------------


def _emit(table, cfg):
    if cfg.out:
        table.write(cfg.out, cfg.fmt)
        print(f"wrote {cfg.out}", file=sys.stderr)
    else:
        text = table.to_csv_text() if cfg.fmt == "csv" else table.to_json_text()
        sys.stdout.write(text)


def _run(cfg):
    if cfg.subcommand == "validate":
        return run_validate(cfg.seed_count)
    if cfg.subcommand == "block":
        table = _block_table(cfg.extra)
    elif cfg.subcommand == "trap":
        table = _trap_table(cfg.extra)
    elif cfg.subcommand == "oracle":
        table = _oracle_table(cfg.extra)
    else:
        print(f"running {cfg.spec.kind}: sizes={cfg.spec.sizes} "
              f"replicas={cfg.spec.replicas}", file=sys.stderr)
        if cfg.trace:
            with open(cfg.trace, "w") as tr:
                table = run_experiment(cfg.spec, threads=cfg.threads, trace=tr)
        else:
            table = run_experiment(cfg.spec, threads=cfg.threads)
    _emit(table, cfg)
    return 0


def main(argv=None):
    try:
        cfg = parse_args(sys.argv[1:] if argv is None else list(argv))
        return _run(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (InvalidSpec, DensityMismatch) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
