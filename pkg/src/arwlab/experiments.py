"""Declarative Monte Carlo drivers and their aggregated result tables.

Fixation and sustained activity are infinite-volume statements, so every
driver here reports finite-volume proxies over an explicit grid of sizes;
growth or persistence across the grid is the evidence, never a verdict.
Drivers are deterministic: replica seeds are a pure function of the master
seed and the replica index, and aggregation is order-insensitive, so a
table is reproducible byte for byte from its recorded spec.

Censoring discipline: replicas that exhaust their toppling budget are
first-class data.  They are counted in the `censored` column and excluded
from means; threshold statistics count them only on the side the budget
bound guarantees.
"""

from dataclasses import dataclass
import concurrent.futures
import csv
import io
import json
import math

import numpy as np

from .engine import DEFAULT_BUDGET, stabilize
from .errors import DensityMismatch, InvalidSpec, StabilizeStatus
from .instructions import InstructionField
from .model import (
    Boundary,
    Box,
    Configuration,
    InitialStateSpec,
    JumpDistribution,
    ModelParams,
    Torus,
    Window,
    sample_initial,
)
from .rng import derive_seed, u64

KINDS = (
    "ConditionB",
    "ConditionU",
    "ConditionE",
    "PhaseScan",
    "RingFixedEnergy",
    "DrivenDissipative",
    "UniversalityCheck",
    "FewStayProbe",
)

CSV_COLUMNS = (
    "kind", "d", "lambda", "zeta", "size", "k_or_rho",
    "statistic", "estimate", "stderr", "replicas", "censored", "seed",
)


def _fmt_float(x):
    return "%.17g" % float(x)


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: model, initial law, size grid, thresholds, seeds.

    `initial` is a single InitialStateSpec, or a tuple of them for
    UniversalityCheck.  `sizes` is the linear scale grid; its meaning per
    driver (window radius, box radius, torus side, interval length) is
    documented on the driver.  `k_grid` holds the thresholds k (ConditionB/U),
    toppling bounds (RingFixedEnergy), or mass fractions rho (FewStayProbe).
    `lam_grid`/`zeta_grid` are only read by the PhaseScan driver.
    """

    kind: str
    dim: int
    jumps: JumpDistribution
    lam: float
    initial: object
    sizes: tuple
    k_grid: tuple = ()
    replicas: int = 100
    budget: int = DEFAULT_BUDGET
    master_seed: int = 0
    lam_grid: tuple = ()
    zeta_grid: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown experiment kind {self.kind!r}")
        object.__setattr__(self, "lam", float(self.lam))
        if not self.lam > 0:
            raise InvalidSpec("sleep rate must be > 0")
        if self.jumps.dim != self.dim:
            raise InvalidSpec("jump distribution dimension does not match d")
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise InvalidSpec("need at least one size")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise InvalidSpec("sizes must be strictly increasing")
        object.__setattr__(self, "k_grid", tuple(float(k) for k in self.k_grid))
        object.__setattr__(self, "lam_grid", tuple(float(v) for v in self.lam_grid))
        object.__setattr__(self, "zeta_grid", tuple(float(v) for v in self.zeta_grid))
        if self.replicas < 1:
            raise InvalidSpec("replicas must be >= 1")
        if self.budget < 1:
            raise InvalidSpec("budget must be >= 1")
        object.__setattr__(self, "master_seed", int(self.master_seed))

    @property
    def params(self):
        return ModelParams(self.lam)

    def replica_seed(self, index):
        """Seed of replica `index`: a pure function of (master_seed, index)."""
        return int(u64(derive_seed(u64(self.master_seed), int(index))))

    def initial_specs(self):
        ini = self.initial
        return tuple(ini) if isinstance(ini, (tuple, list)) else (ini,)

    def resolved(self):
        """Full spec, defaults included, as an ordered str->str mapping."""
        ini = "|".join(
            f"{s.kind}:{_fmt_float(s.density)}" for s in self.initial_specs()
        )
        return {
            "kind": self.kind,
            "d": str(self.dim),
            "lambda": _fmt_float(self.lam),
            "jumps": ",".join(_fmt_float(w) for w in self.jumps.weights),
            "initial": ini,
            "sizes": ",".join(str(s) for s in self.sizes),
            "k_grid": ",".join(_fmt_float(k) for k in self.k_grid),
            "replicas": str(self.replicas),
            "budget": str(self.budget),
            "master_seed": str(self.master_seed),
            "lam_grid": ",".join(_fmt_float(v) for v in self.lam_grid),
            "zeta_grid": ",".join(_fmt_float(v) for v in self.zeta_grid),
        }


# ---------------------------------------------------------------------------
# result tables


@dataclass(frozen=True)
class Row:
    """One aggregated estimate; fields mirror the CSV columns exactly."""

    kind: str
    d: int
    lam: float
    zeta: float
    size: int
    k_or_rho: float
    statistic: str
    estimate: float
    stderr: float
    replicas: int
    censored: int
    seed: int


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return _fmt_float(value)
    return str(value)


def _parse_opt_float(text):
    return None if text == "" else float(text)


class ResultTable:
    """Rows plus the resolved spec they came from.

    The spec header makes every table file self-describing: re-running with
    the recorded values reproduces the file byte for byte.  Floats are
    serialized with 17 significant digits so the round trip is exact.
    """

    FORMAT = "arw-table v1"

    def __init__(self, header, rows):
        self.header = dict(header)
        self.rows = list(rows)

    def __eq__(self, other):
        return (
            isinstance(other, ResultTable)
            and self.header == other.header
            and self.rows == other.rows
        )

    def __repr__(self):
        return f"ResultTable({self.header.get('kind')!r}, rows={len(self.rows)})"

    def find(self, **keys):
        """Rows whose named fields all equal the given values."""
        out = []
        for r in self.rows:
            if all(getattr(r, k) == v for k, v in keys.items()):
                out.append(r)
        return out

    # -- CSV ----------------------------------------------------------------

    def to_csv_text(self):
        buf = io.StringIO()
        buf.write(f"# {self.FORMAT}\n")
        for key, val in self.header.items():
            buf.write(f"# {key} = {val}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([
                r.kind, r.d, _cell(r.lam), _cell(r.zeta), r.size,
                _cell(r.k_or_rho), r.statistic, _cell(r.estimate),
                _cell(r.stderr), r.replicas, r.censored, r.seed,
            ])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text):
        header = {}
        body = []
        for line in text.splitlines():
            if line.startswith("# "):
                payload = line[2:]
                if payload == cls.FORMAT:
                    continue
                key, _, val = payload.partition(" = ")
                header[key] = val
            elif line.strip():
                body.append(line)
        rows = []
        reader = csv.reader(body)
        cols = next(reader)
        if tuple(cols) != CSV_COLUMNS:
            raise InvalidSpec(f"unexpected table columns {cols!r}")
        for rec in reader:
            rows.append(Row(
                kind=rec[0], d=int(rec[1]), lam=float(rec[2]),
                zeta=_parse_opt_float(rec[3]), size=int(rec[4]),
                k_or_rho=_parse_opt_float(rec[5]), statistic=rec[6],
                estimate=_parse_opt_float(rec[7]),
                stderr=_parse_opt_float(rec[8]), replicas=int(rec[9]),
                censored=int(rec[10]), seed=int(rec[11]),
            ))
        return cls(header, rows)

    # -- JSON mirror ----------------------------------------------------------

    def to_json_text(self):
        # hand-rolled emitter: fixed key order and %.17g floats keep the
        # byte-identical round-trip contract under our control
        def jnum(x):
            if x is None:
                return "null"
            if isinstance(x, float):
                if math.isinf(x):
                    return "Infinity" if x > 0 else "-Infinity"
                return _fmt_float(x)
            return str(x)

        parts = ["{\n"]
        parts.append(f'  "format": {json.dumps(self.FORMAT)},\n')
        parts.append('  "spec": {')
        parts.append(", ".join(
            f"{json.dumps(k)}: {json.dumps(v)}" for k, v in self.header.items()
        ))
        parts.append("},\n")
        parts.append('  "rows": [\n')
        recs = []
        for r in self.rows:
            recs.append(
                "    {"
                + ", ".join([
                    f'"kind": {json.dumps(r.kind)}',
                    f'"d": {r.d}',
                    f'"lambda": {jnum(r.lam)}',
                    f'"zeta": {jnum(r.zeta)}',
                    f'"size": {r.size}',
                    f'"k_or_rho": {jnum(r.k_or_rho)}',
                    f'"statistic": {json.dumps(r.statistic)}',
                    f'"estimate": {jnum(r.estimate)}',
                    f'"stderr": {jnum(r.stderr)}',
                    f'"replicas": {r.replicas}',
                    f'"censored": {r.censored}',
                    f'"seed": {r.seed}',
                ])
                + "}"
            )
        parts.append(",\n".join(recs))
        parts.append("\n  ]\n}\n")
        return "".join(parts)

    @classmethod
    def from_json_text(cls, text):
        doc = json.loads(text)
        if doc.get("format") != cls.FORMAT:
            raise InvalidSpec(f"unexpected table format {doc.get('format')!r}")
        rows = []
        for rec in doc["rows"]:
            rows.append(Row(
                kind=rec["kind"], d=int(rec["d"]), lam=float(rec["lambda"]),
                zeta=None if rec["zeta"] is None else float(rec["zeta"]),
                size=int(rec["size"]),
                k_or_rho=None if rec["k_or_rho"] is None else float(rec["k_or_rho"]),
                statistic=rec["statistic"],
                estimate=None if rec["estimate"] is None else float(rec["estimate"]),
                stderr=None if rec["stderr"] is None else float(rec["stderr"]),
                replicas=int(rec["replicas"]), censored=int(rec["censored"]),
                seed=int(rec["seed"]),
            ))
        return cls(doc["spec"], rows)

    def write(self, path, fmt="csv"):
        text = self.to_csv_text() if fmt == "csv" else self.to_json_text()
        with open(path, "w") as fh:
            fh.write(text)


def spec_from_resolved(header):
    """Rebuild the ExperimentSpec recorded by resolved() in a table header.

    Inverse of ExperimentSpec.resolved() for every initial-state law except
    "explicit", whose site list is not recorded in the header."""
    dim = int(header["d"])
    jumps = JumpDistribution(dim, tuple(float(w) for w in header["jumps"].split(",")))
    inis = []
    for token in header["initial"].split("|"):
        kind, _, dens = token.partition(":")
        if kind == "explicit":
            raise InvalidSpec("explicit initial states cannot be rebuilt from a header")
        inis.append(InitialStateSpec(kind, float(dens)))

    def grid(key):
        return tuple(float(v) for v in header[key].split(",")) if header[key] else ()

    return ExperimentSpec(
        header["kind"], dim, jumps, float(header["lambda"]),
        inis[0] if len(inis) == 1 else tuple(inis),
        tuple(int(s) for s in header["sizes"].split(",")),
        k_grid=grid("k_grid"), replicas=int(header["replicas"]),
        budget=int(header["budget"]), master_seed=int(header["master_seed"]),
        lam_grid=grid("lam_grid"), zeta_grid=grid("zeta_grid"),
    )


# ---------------------------------------------------------------------------
# aggregation helpers


def _binomial(hits, n):
    if n == 0:
        return None, None
    p = hits / n
    return p, math.sqrt(p * (1.0 - p) / n)


def _mean_se(values):
    n = len(values)
    if n == 0:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(arr.mean()), se


def _map_indexed(worker, args, threads):
    """Run worker over args; results come back in input order either way."""
    if threads is not None and threads > 1:
        chunk = max(1, len(args) // (4 * threads))
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, args, chunksize=chunk))
    return [worker(a) for a in args]


def _sub_seed(seed, index):
    return int(u64(derive_seed(u64(seed), index)))


# ---------------------------------------------------------------------------
# origin-odometer conditions (fixation / activity proxies)


def _origin_volume(dim, half_width):
    """Window with one spare ring and the flats of the centered box inside."""
    dom = Window((half_width + 1,) * dim)
    coords = dom.all_coords()
    mask = (np.abs(coords) <= half_width).all(axis=1)
    return dom, np.flatnonzero(mask).astype(np.int64)


def _condition_origin_worker(args):
    dim, jumps, lam, initial, half_width, budget, rep_seed = args
    dom, vol = _origin_volume(dim, half_width)
    field = InstructionField(_sub_seed(rep_seed, 1), ModelParams(lam), jumps)
    drawn = sample_initial(initial, dom, _sub_seed(rep_seed, 2))
    grid = drawn.grid
    inside = np.zeros(dom.n_sites, dtype=bool)
    inside[vol] = True
    grid[~inside] = 0
    cfg = Configuration(dom, grid)
    cfg, odo, status = stabilize(cfg, vol, field, budget=budget)
    return int(odo.counts[dom.origin_flat]), status is not StabilizeStatus.STABLE


def _run_condition_origin(spec, statistic, indicator, threads):
    initial = spec.initial_specs()[0]
    rows = []
    for half_width in spec.sizes:
        args = [
            (spec.dim, spec.jumps, spec.lam, initial, half_width,
             spec.budget, spec.replica_seed(rep))
            for rep in range(spec.replicas)
        ]
        results = _map_indexed(_condition_origin_worker, args, threads)
        censored = sum(1 for _, c in results if c)
        kept = [m for m, c in results if not c]
        for k in spec.k_grid:
            hits = sum(1 for m in kept if indicator(m, k))
            est, se = _binomial(hits, len(kept))
            rows.append(Row(
                spec.kind, spec.dim, spec.lam, initial.density, half_width,
                float(k), statistic, est, se, spec.replicas, censored,
                spec.master_seed,
            ))
    return ResultTable(spec.resolved(), rows)


def run_condition_b(spec, threads=1):
    """Empirical P(m(0) <= k): sampled initial on the centered box of the
    given half-width, stabilized inside it, origin odometer tabulated per
    threshold.  A non-vanishing profile across growing sizes is the
    fixation-side proxy.  `sizes` are box half-widths."""
    if spec.kind != "ConditionB":
        raise InvalidSpec(f"spec kind {spec.kind!r} is not ConditionB")
    return _run_condition_origin(
        spec, "P(m(0)<=k)", lambda m, k: m <= k, threads
    )


def run_condition_u(spec, threads=1):
    """Empirical P(m(0) >= k), the activity-side dual of run_condition_b;
    a profile that grows with size at fixed k is the activity proxy."""
    if spec.kind != "ConditionU":
        raise InvalidSpec(f"spec kind {spec.kind!r} is not ConditionU")
    return _run_condition_origin(
        spec, "P(m(0)>=k)", lambda m, k: m >= k, threads
    )


# ---------------------------------------------------------------------------
# exit-flux density (ConditionE) and the phase scan built on it


def _flux_worker(args):
    dim, jumps, lam, initial, half_width, budget, rep_seed = args
    dom = Box((half_width,) * dim, Boundary.KILL)
    field = InstructionField(_sub_seed(rep_seed, 1), ModelParams(lam), jumps)
    cfg = sample_initial(initial, dom, _sub_seed(rep_seed, 2))
    before = int(cfg.total)
    cfg, _odo, status = stabilize(cfg, None, field, budget=budget)
    exits = before - int(cfg.total)
    return exits / dom.n_sites, status is not StabilizeStatus.STABLE


def _flux_rows(spec, initial, lam, statistic, seed_of, threads):
    rows = []
    for half_width in spec.sizes:
        args = [
            (spec.dim, spec.jumps, lam, initial, half_width, spec.budget,
             seed_of(rep))
            for rep in range(spec.replicas)
        ]
        results = _map_indexed(_flux_worker, args, threads)
        censored = sum(1 for _, c in results if c)
        est, se = _mean_se([v for v, c in results if not c])
        rows.append(Row(
            spec.kind, spec.dim, lam, initial.density, half_width, None,
            statistic, est, se, spec.replicas, censored, spec.master_seed,
        ))
    return rows


def run_condition_e(spec, threads=1):
    """Exit-flux density E[M]/|V|: kill-boundary box of the given half-width,
    M = particles absorbed at the boundary during stabilization.  Positivity
    persisting across sizes is the activity proxy."""
    if spec.kind != "ConditionE":
        raise InvalidSpec(f"spec kind {spec.kind!r} is not ConditionE")
    initial = spec.initial_specs()[0]
    rows = _flux_rows(
        spec, initial, spec.lam, "E[M]/|V|", spec.replica_seed, threads
    )
    return ResultTable(spec.resolved(), rows)


def run_phase_scan(spec, threads=1):
    """Exit-flux density over a (lambda, zeta) grid; raw proxies only, no
    phase classification.  The initial law's kind is kept and its density
    replaced by each grid zeta.  Each grid point gets its own replica seed
    stream derived from (master_seed, point index)."""
    if spec.kind != "PhaseScan":
        raise InvalidSpec(f"spec kind {spec.kind!r} is not PhaseScan")
    if not spec.lam_grid or not spec.zeta_grid:
        raise InvalidSpec("phase scan needs lam_grid and zeta_grid")
    base = spec.initial_specs()[0]
    rows = []
    point = 0
    for lam in spec.lam_grid:
        for zeta in spec.zeta_grid:
            initial = InitialStateSpec(base.kind, zeta)
            point_seed = _sub_seed(spec.master_seed, point)
            rows.extend(_flux_rows(
                spec, initial, lam, "E[M]/|V|",
                lambda rep, s=point_seed: _sub_seed(s, rep), threads,
            ))
            point += 1
    return ResultTable(spec.resolved(), rows)


def run_universality_check(spec, threads=1):
    """Exit-flux proxies side by side for several initial laws of one
    density; rows are distinguished by the statistic suffix.  Laws must
    agree on density exactly, else DensityMismatch."""
    if spec.kind != "UniversalityCheck":
        raise InvalidSpec(f"spec kind {spec.kind!r} is not UniversalityCheck")
    initials = spec.initial_specs()
    if len(initials) < 2:
        raise InvalidSpec("universality check needs >= 2 initial laws")
    densities = {ini.density for ini in initials}
    if len(densities) != 1:
        raise DensityMismatch(f"initial densities differ: {sorted(densities)}")
    rows = []
    for ini in initials:
        rows.extend(_flux_rows(
            spec, ini, spec.lam, f"E[M]/|V|[{ini.kind}]",
            spec.replica_seed, threads,
        ))
    return ResultTable(spec.resolved(), rows)


# ---------------------------------------------------------------------------
# fixed-energy ring


def _ring_worker(args):
    jumps, lam, initial, side, budget, rep_seed = args
    dom = Torus(int(side))
    field = InstructionField(_sub_seed(rep_seed, 1), ModelParams(lam), jumps)
    cfg = sample_initial(initial, dom, _sub_seed(rep_seed, 2))
    cfg, odo, status = stabilize(cfg, None, field, budget=budget)
    return int(odo.counts.sum()), status is not StabilizeStatus.STABLE


def run_ring(spec, threads=1):
    """Total topplings to absorb a sampled ring (1d torus, symmetric jumps).

    Per size: P(T <= k) for each threshold in k_grid (a censored replica has
    T >= budget, so it counts as exceeding any k < budget), the median of T
    with censored replicas placed at +inf, and the censored fraction.
    `sizes` are torus side lengths."""
    if spec.kind != "RingFixedEnergy":
        raise InvalidSpec(f"spec kind {spec.kind!r} is not RingFixedEnergy")
    if spec.dim != 1 or spec.jumps.weights != (0.5, 0.5):
        raise InvalidSpec("ring runs are 1d with symmetric jumps")
    if any(k >= spec.budget for k in spec.k_grid):
        raise InvalidSpec("toppling thresholds must be below the budget")
    initial = spec.initial_specs()[0]
    rows = []
    for side in spec.sizes:
        args = [
            (spec.jumps, spec.lam, initial, side, spec.budget,
             spec.replica_seed(rep))
            for rep in range(spec.replicas)
        ]
        results = _map_indexed(_ring_worker, args, threads)
        n = len(results)
        censored = sum(1 for _, c in results if c)
        values = [math.inf if c else float(t) for t, c in results]
        for k in spec.k_grid:
            hits = sum(1 for v in values if v <= k)
            est, se = _binomial(hits, n)
            rows.append(Row(
                spec.kind, 1, spec.lam, initial.density, side, float(k),
                "P(T<=k)", est, se, n, censored, spec.master_seed,
            ))
        med = float(np.median(values))
        rows.append(Row(
            spec.kind, 1, spec.lam, initial.density, side, None, "T_median",
            None if math.isinf(med) else med, None, n, censored,
            spec.master_seed,
        ))
        frac, se = _binomial(censored, n)
        rows.append(Row(
            spec.kind, 1, spec.lam, initial.density, side, None,
            "censored_fraction", frac, se, n, censored, spec.master_seed,
        ))
    return ResultTable(spec.resolved(), rows)


def calibrate_ring_kappa(spec, threads=1):
    """Pilot coefficient for T <= kappa * n * ln(n)^2 bounds.

    Runs the ring at the smallest size in the spec and returns the 99th
    percentile of T / (n * ln(n)^2) over uncensored replicas."""
    side = spec.sizes[0]
    args = [
        (spec.jumps, spec.lam, spec.initial_specs()[0], side, spec.budget,
         spec.replica_seed(rep))
        for rep in range(spec.replicas)
    ]
    results = _map_indexed(_ring_worker, args, threads)
    kept = [t for t, c in results if not c]
    if not kept:
        raise InvalidSpec("pilot produced no uncensored replicas")
    scale = side * math.log(side) ** 2
    return float(np.percentile(np.asarray(kept, dtype=np.float64) / scale, 99))


# ---------------------------------------------------------------------------
# driven-dissipative chain


def run_driven_dissipative(spec, trace=None):
    """Stationary density of the add-then-stabilize chain on a kill box.

    One chain per size (`sizes` are box half-widths; half-width 0 is the
    single-site chain): add a particle at a uniform site, stabilize fully,
    record density.  `replicas` is the chain length.  The estimate discards
    the first 20% of steps and takes batch means over 20 batches for an
    autocorrelation-aware stderr.  A budget blowout stops the chain; the
    remaining steps are counted as censored."""
    if spec.kind != "DrivenDissipative":
        raise InvalidSpec(f"spec kind {spec.kind!r} is not DrivenDissipative")
    rows = []
    for half_width in spec.sizes:
        dom = Box((half_width,) * spec.dim, Boundary.KILL)
        chain_seed = _sub_seed(spec.master_seed, half_width)
        field = InstructionField(_sub_seed(chain_seed, 1), spec.params, spec.jumps)
        picker = np.random.Generator(np.random.PCG64(_sub_seed(chain_seed, 2)))
        cfg = Configuration.empty(dom)
        odo = None
        densities = []
        censored = 0
        for step in range(spec.replicas):
            site = dom.coords_of(int(picker.integers(dom.n_sites)))
            cfg.add_at(site)
            # one odometer for the whole chain: each round consumes the
            # stacks from where the previous round stopped
            cfg, odo, status = stabilize(
                cfg, None, field, budget=spec.budget, odo=odo
            )
            if status is not StabilizeStatus.STABLE:
                censored = spec.replicas - step
                break
            density = cfg.total / dom.n_sites
            densities.append(density)
            if trace is not None:
                trace.write(json.dumps({
                    "size": half_width, "step": step, "density": density,
                }) + "\n")
        est, se = _batch_means(densities)
        rows.append(Row(
            spec.kind, spec.dim, spec.lam, None, half_width, None,
            "stationary_density", est, se, spec.replicas, censored,
            spec.master_seed,
        ))
    return ResultTable(spec.resolved(), rows)


def _batch_means(values, batches=20, burn_in=0.2):
    n = len(values)
    keep = values[int(n * burn_in):]
    if not keep:
        return None, None
    arr = np.asarray(keep, dtype=np.float64)
    b = min(batches, len(keep))
    per = len(keep) // b
    means = arr[: b * per].reshape(b, per).mean(axis=1)
    se = float(means.std(ddof=1) / math.sqrt(b)) if b > 1 else 0.0
    return float(arr.mean()), se


# ---------------------------------------------------------------------------
# retained-mass tail on a killed interval


def _fewstay_worker(args):
    jumps, lam, initial, length, budget, rep_seed = args
    half = (int(length) - 2) // 2
    dom = Box((max(half, 1),), Boundary.KILL)
    field = InstructionField(_sub_seed(rep_seed, 1), ModelParams(lam), jumps)
    cfg = sample_initial(initial, dom, _sub_seed(rep_seed, 2))
    cfg, _odo, status = stabilize(cfg, None, field, budget=budget)
    return int(cfg.total), status is not StabilizeStatus.STABLE


def run_fewstay_probe(spec, threads=1):
    """Tail probability of the mass retained by a killed interval.

    `sizes` are interval lengths r; the simulated domain is the centered box
    of half-width (r-2)//2 (exactly the r-1 interior sites when r is even),
    with kill at both ends.  For each rho in k_grid the row reports
    P(retained mass >= rho * r); geometric decay in r is the expected
    small-lambda signature."""
    if spec.kind != "FewStayProbe":
        raise InvalidSpec(f"spec kind {spec.kind!r} is not FewStayProbe")
    if spec.dim != 1 or spec.jumps.weights != (0.5, 0.5):
        raise InvalidSpec("the retained-mass probe is 1d with symmetric jumps")
    if any(s < 4 for s in spec.sizes):
        raise InvalidSpec("interval lengths must be >= 4")
    initial = spec.initial_specs()[0]
    rows = []
    for length in spec.sizes:
        args = [
            (spec.jumps, spec.lam, initial, length, spec.budget,
             spec.replica_seed(rep))
            for rep in range(spec.replicas)
        ]
        results = _map_indexed(_fewstay_worker, args, threads)
        censored = sum(1 for _, c in results if c)
        kept = [m for m, c in results if not c]
        for rho in spec.k_grid:
            hits = sum(1 for m in kept if m >= rho * length)
            est, se = _binomial(hits, len(kept))
            rows.append(Row(
                spec.kind, 1, spec.lam, initial.density, length, float(rho),
                "P(mass>=rho*r)", est, se, spec.replicas, censored,
                spec.master_seed,
            ))
    return ResultTable(spec.resolved(), rows)


# ---------------------------------------------------------------------------
# dispatch


_DRIVERS = {
    "ConditionB": run_condition_b,
    "ConditionU": run_condition_u,
    "ConditionE": run_condition_e,
    "PhaseScan": run_phase_scan,
    "RingFixedEnergy": run_ring,
    "UniversalityCheck": run_universality_check,
    "FewStayProbe": run_fewstay_probe,
}


def run_experiment(spec, threads=1, trace=None):
    """Dispatch a spec to its driver."""
    if spec.kind == "DrivenDissipative":
        return run_driven_dissipative(spec, trace=trace)
    return _DRIVERS[spec.kind](spec, threads=threads)
