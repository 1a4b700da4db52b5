"""Randomized exact-invariant suite behind the `validate` subcommand.

Every check here asserts an identity that holds exactly (not statistically)
for the site-wise construction, on small random instances: stabilization
order cannot matter, larger volumes and configurations cannot shrink the
odometer, the weak/plain/strong odometers nest, strong minus weak equals one
extra particle, particle counts balance, and the continuous-time run must
land on the engine's output.  A violation prints a minimal reproducer
(seed, instance, expected vs got) and makes the suite exit nonzero.
"""

import random
import sys
import warnings

import numpy as np

from . import engine
from .dynamics import ClockField, ct_run
from .errors import RunStatus, StabilizeStatus
from .instructions import InstructionField
from .model import (
    Boundary,
    Box,
    Configuration,
    JumpDistribution,
    ModelParams,
    Torus,
    Window,
)

_MAX_SITES = 25
_MAX_PARTICLES = 30
_BUDGET = 1_000_000


class _Instance:
    """One randomized model + configuration, with a printable description."""

    def __init__(self, seed):
        rnd = random.Random(seed)
        self.seed = seed
        self.dim = rnd.choice([1, 2])
        self.lam = rnd.choice([0.2, 1.0, 5.0])
        if self.dim == 1:
            self.jumps = rnd.choice([
                JumpDistribution.symmetric(1),
                JumpDistribution.directed_1d(),
                JumpDistribution(1, (0.7, 0.3)),
            ])
        else:
            self.jumps = rnd.choice([
                JumpDistribution.symmetric(2),
                JumpDistribution(2, (0.4, 0.2, 0.3, 0.1)),
            ])
        self.field_seed = rnd.getrandbits(63)
        self.clock_seed = rnd.getrandbits(63)
        self.strat_seed = rnd.getrandbits(31)
        self.rnd = rnd

    def params(self):
        return ModelParams(self.lam)

    def field(self):
        return InstructionField(self.field_seed, self.params(), self.jumps)

    def closed_domain(self, light=False):
        """Box/torus instance small enough to absorb within budget.

        light=True keeps the instance tiny (few particles, short domain) so
        that event-by-event runs stay cheap; dense low-sleep instances sit
        near criticality and absorb painfully slowly."""
        rnd = self.rnd
        kind = rnd.choice(["kill", "closed", "torus"])
        lo = 8 if light else 4
        if self.dim == 1:
            if kind == "torus":
                dom = Torus(rnd.randint(lo, max(lo, _MAX_SITES)))
            else:
                dom = Box((rnd.randint(lo // 2, (_MAX_SITES - 1) // 2),),
                          Boundary.KILL if kind == "kill" else Boundary.CLOSED)
        else:
            if kind == "torus":
                dom = Torus(rnd.randint(3, 5), dim=2)
            else:
                r = rnd.randint(1, 2)
                dom = Box((r, r), Boundary.KILL if kind == "kill" else Boundary.CLOSED)
        if light and kind != "kill":
            # keep recurrent domains far below the sleep-driven critical
            # density, else absorption times explode under drift
            cap = 1 if self.lam < 1.0 else 2
        elif light:
            cap = 4
        elif kind == "kill":
            cap = _MAX_PARTICLES
        else:
            cap = max(1, (3 * dom.n_sites) // 5)
        cfg = Configuration.empty(dom)
        for _ in range(rnd.randint(1, min(_MAX_PARTICLES, cap))):
            cfg.add_at(dom.coords_of(rnd.randrange(dom.n_sites)))
        return dom, cfg

    def window_domain(self):
        """Window with a centered volume V that keeps the one-ring margin."""
        rnd = self.rnd
        if self.dim == 1:
            radius = rnd.randint(3, 6)
            dom = Window((radius,))
        else:
            radius = 2
            dom = Window((radius, radius))
        inner = radius - 1
        coords = dom.all_coords()
        mask = (np.abs(coords) <= inner).all(axis=1)
        vol = np.flatnonzero(mask).astype(np.int64)
        cfg = Configuration.empty(dom)
        for _ in range(rnd.randint(1, 12)):
            cfg.add_at(tuple(coords[rnd.choice(vol)]))
        return dom, vol, inner, cfg

    def describe(self, dom, cfg):
        return (
            f"seed={self.seed} domain={dom.shape_token()} lam={self.lam} "
            f"weights={self.jumps.weights} initial={cfg.occupied()}"
        )


def _stable(*statuses):
    return all(s is StabilizeStatus.STABLE for s in statuses)


def check_abelian(inst):
    dom, cfg = inst.closed_domain()
    a, odo_a, st_a = engine.stabilize(
        cfg.copy(), None, inst.field(), engine.Strategy.sweep_low_to_high(),
        budget=_BUDGET,
    )
    b, odo_b, st_b = engine.stabilize(
        cfg.copy(), None, inst.field(),
        engine.Strategy.random_unstable(inst.strat_seed), budget=_BUDGET,
    )
    if not _stable(st_a, st_b):
        return None
    if not (np.array_equal(a.grid, b.grid)
            and np.array_equal(odo_a.counts, odo_b.counts)
            and np.array_equal(odo_a.jump_counts, odo_b.jump_counts)):
        return (
            "order dependence: sweep and random strategies disagree\n"
            f"  {inst.describe(dom, cfg)}\n"
            f"  sweep grid={a.grid.tolist()} counts={odo_a.counts.tolist()}\n"
            f"  random grid={b.grid.tolist()} counts={odo_b.counts.tolist()}"
        )
    return None


def check_monotone(inst):
    dom, vol, inner, cfg = inst.window_domain()
    rnd = inst.rnd
    sub = inner - 1 if inner >= 1 and rnd.random() < 0.5 else inner
    coords = dom.all_coords()
    vol_small = np.flatnonzero((np.abs(coords) <= sub).all(axis=1)).astype(np.int64)
    small = Configuration.empty(dom)
    for f in np.flatnonzero(cfg.grid >= 1):
        if abs(coords[f]).max() <= sub:
            for _ in range(int(cfg.grid[f])):
                small.add_at(tuple(coords[f]))
    big = small.copy()
    for _ in range(rnd.randint(0, 6)):
        big.add_at(tuple(coords[rnd.choice(vol)]))
    _, odo_small, st_a = engine.stabilize(small, vol_small, inst.field(), budget=_BUDGET)
    _, odo_big, st_b = engine.stabilize(big, vol, inst.field(), budget=_BUDGET)
    if not _stable(st_a, st_b):
        return None
    if (odo_small.counts > odo_big.counts).any():
        return (
            "monotonicity broken: smaller volume/configuration out-toppled the larger\n"
            f"  {inst.describe(dom, big)}\n"
            f"  small counts={odo_small.counts.tolist()}\n"
            f"  big counts={odo_big.counts.tolist()}"
        )
    return None


def check_sandwich(inst):
    dom, vol, _inner, cfg = inst.window_domain()
    _, odo_w, st_w = engine.weak_stabilize(cfg.copy(), vol, inst.field(), budget=_BUDGET)
    _, odo_p, st_p = engine.stabilize(cfg.copy(), vol, inst.field(), budget=_BUDGET)
    _, odo_s, st_s = engine.strong_stabilize(cfg.copy(), vol, inst.field(), budget=_BUDGET)
    if not _stable(st_w, st_p, st_s):
        return None
    if (odo_w.counts > odo_p.counts).any() or (odo_p.counts > odo_s.counts).any():
        return (
            "odometer sandwich broken: expected weak <= plain <= strong pointwise\n"
            f"  {inst.describe(dom, cfg)}\n"
            f"  weak={odo_w.counts.tolist()}\n"
            f"  plain={odo_p.counts.tolist()}\n"
            f"  strong={odo_s.counts.tolist()}"
        )
    return None


def check_strong_weak(inst):
    dom, vol, _inner, cfg = inst.window_domain()
    plus = cfg.copy()
    plus.add_at((0,) * inst.dim)
    _, odo_s, st_s = engine.strong_stabilize(cfg.copy(), vol, inst.field(), budget=_BUDGET)
    _, odo_w, st_w = engine.weak_stabilize(plus, vol, inst.field(), budget=_BUDGET)
    if not _stable(st_s, st_w):
        return None
    if not np.array_equal(odo_s.jump_counts, odo_w.jump_counts):
        return (
            "strong != weak-with-extra-particle on the jump odometer\n"
            f"  {inst.describe(dom, cfg)}\n"
            f"  strong jumps={odo_s.jump_counts.tolist()}\n"
            f"  weak+1 jumps={odo_w.jump_counts.tolist()}"
        )
    return None


def check_conservation(inst):
    dom, cfg = inst.closed_domain()
    before = int(cfg.total)
    out, odo, st = engine.stabilize(cfg, None, inst.field(), budget=_BUDGET)
    if not _stable(st):
        return None
    recounted = out.recount()
    if recounted != out.total:
        return (
            "bookkeeping drift: configuration total disagrees with its grid\n"
            f"  {inst.describe(dom, out)}\n  cached={out.total} grid={recounted}"
        )
    moved_in = int(odo.inflow.sum())
    jumped = int(odo.jump_counts.sum())
    if dom.boundary_code == 1:  # kill: every jump either lands or exits
        if before - recounted != jumped - moved_in:
            return (
                "kill-boundary balance broken: initial - final != jumps - landings\n"
                f"  {inst.describe(dom, out)}\n"
                f"  initial={before} final={recounted} jumps={jumped} landings={moved_in}"
            )
    else:
        if recounted != before:
            return (
                "particle count not conserved on a closed domain\n"
                f"  {inst.describe(dom, out)}\n  initial={before} final={recounted}"
            )
    return None


def check_ct_equivalence(inst):
    dom, cfg = inst.closed_domain(light=True)
    res = ct_run(cfg.copy(), inst.field(), ClockField(inst.clock_seed), 1e6)
    if res.status is not RunStatus.SUCCESS:
        return None
    ref, odo, st = engine.stabilize(cfg.copy(), None, inst.field(), budget=_BUDGET)
    if not _stable(st):
        return None
    if not (np.array_equal(res.final_cfg.grid, ref.grid)
            and np.array_equal(res.odometer.counts, odo.counts)):
        return (
            "continuous-time run disagrees with the engine on a shared field\n"
            f"  {inst.describe(dom, cfg)}\n"
            f"  ct grid={res.final_cfg.grid.tolist()} counts={res.odometer.counts.tolist()}\n"
            f"  engine grid={ref.grid.tolist()} counts={odo.counts.tolist()}"
        )
    return None


CHECKS = (
    ("abelianness", check_abelian),
    ("monotonicity", check_monotone),
    ("sandwich", check_sandwich),
    ("strong-weak", check_strong_weak),
    ("conservation", check_conservation),
    ("ct-engine", check_ct_equivalence),
)


def run_validate(seed_count, out=None, progress=None):
    """Run the invariant suite over seed_count random instances.

    Returns the process exit code: 0 when every check on every instance
    holds, 2 on any violation.  Violations are printed with a minimal
    reproducer to `out` (default stdout)."""
    out = out or sys.stdout
    progress = progress or sys.stderr
    seed_count = int(seed_count)
    if seed_count == 0:
        warnings.warn("validate ran zero checks (seed count 0)", stacklevel=2)
        print("checked 0 instances, 0 violations", file=progress)
        return 0
    violations = 0
    for seed in range(seed_count):
        for name, check in CHECKS:
            msg = check(_Instance(seed))
            if msg is not None:
                violations += 1
                print(f"violation: check={name} seed={seed}", file=out)
                print(f"  {msg}", file=out)
        if progress is not None and seed and seed % 200 == 0:
            print(f"  ... {seed}/{seed_count} instances", file=progress)
    print(f"checked {seed_count} instances, {violations} violations", file=progress)
    return 0 if violations == 0 else 2
