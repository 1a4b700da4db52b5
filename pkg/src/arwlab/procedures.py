"""Constructions built on top of the toppling engine.

Each routine packages one reusable device: the left-to-right exhaustive
sweep for directed walks, the trap-setting exploration on the line, the
ordered drive that pushes particles along a direction and counts escapes,
Monte Carlo estimates for the killed walk and for returns to the start,
single-block throughput functions, and a two-color destruction urn.
"""

from dataclasses import dataclass
import json
import warnings

import numpy as np

from . import _kernels as K
from .engine import (
    DEFAULT_BUDGET,
    Odometer,
    Strategy,
    _field_args,
    _geometry,
    stabilize,
)
from .errors import (
    InvalidSpec,
    InvalidVolume,
    NonBinaryInput,
    NotTransient,
    RunStatus,
    StabilizeStatus,
    WrongModel,
)
from .model import B_KILL, EMPTY, SLEEPING, Configuration, Window, count_of
from .rng import derive_seed, u64


def _emit(trace, payload):
    if trace is not None:
        trace.write(json.dumps(payload) + "\n")


# ---------------------------------------------------------------------------
# directed sweep


@dataclass
class SweepResult:
    """Outcome of the site-by-site sweep toward the origin.

    outflow[i] is the number of particles pushed out of the i-th swept site
    into the next one; outflow[0] = 0 by convention, so outflow[length] is
    the flow arriving at the origin.  origin_odometer is the number of
    instructions the origin itself then consumes.
    """

    outflow: np.ndarray
    origin_odometer: int
    status: StabilizeStatus
    cfg: Configuration
    odometer: Odometer

    @property
    def length(self):
        return self.outflow.shape[0] - 1


def directed_sweep(cfg, field, length=None, *, budget=DEFAULT_BUDGET, trace=None):
    """Stabilize the sites left of the origin one at a time, left to right.

    Only defined for d=1 fields whose every jump goes right: then exhausting
    each site in turn is a full stabilization of the swept sites, and the
    per-site outflow obeys the reflected recursion
    next = max(previous + arrivals - lastOneSleeps, 0).  The origin is
    stabilized afterwards on the same odometer, so origin_odometer matches
    what a generic stabilize would have produced.
    """
    domain = cfg.domain
    if domain.dim != 1:
        raise WrongModel("directed sweep is a one-dimensional construction")
    if not field.jumps.is_directed_1d:
        raise WrongModel("directed sweep needs every jump to go right")
    if not isinstance(domain, Window):
        raise WrongModel("directed sweep parks outflow past the origin; use a Window")
    radius = domain.radii[0]
    swept = radius if length is None else int(length)
    if not 1 <= swept <= radius:
        raise InvalidVolume(f"sweep length {swept} does not fit a window of radius {radius}")

    init_counts = None
    if trace is not None:
        init_counts = np.where(cfg.grid == SLEEPING, 1, np.maximum(cfg.grid, 0))

    # window flats are coord + radius, so the swept sites are contiguous
    left_flats = np.arange(radius - swept, radius, dtype=np.int64)
    origin = domain.origin_flat
    odo = Odometer(domain)
    cfg, odo, status = stabilize(
        cfg, left_flats, field, Strategy.exhaust_site_then_next(), budget=budget, odo=odo
    )
    outflow = np.zeros(swept + 1, dtype=np.int64)
    outflow[1:] = odo.jump_counts[left_flats]
    if status:
        remaining = max(budget - int(odo.counts.sum()), 0)
        cfg, odo, status = stabilize(
            cfg,
            np.array([origin], dtype=np.int64),
            field,
            Strategy.exhaust_site_then_next(),
            budget=remaining,
            odo=odo,
        )
    if trace is not None and status:
        _trace_sweep(trace, domain, field, odo, init_counts, left_flats, origin)
    return SweepResult(outflow, int(odo.counts[origin]), status, cfg, odo)


def _trace_sweep(trace, domain, field, odo, init_counts, left_flats, origin):
    # the sweep consumes each site's slots contiguously in sweep order, so
    # the executed instruction sequence can be reconstructed per site
    step = 0
    for f in list(left_flats) + [origin]:
        present = int(init_counts[f] + odo.inflow[f])
        coords = [int(c) for c in domain.coords_of(int(f))]
        for j in range(1, int(odo.counts[f]) + 1):
            code = field.code_at(coords, j)
            if code < 0:
                kind = "Sleep"
                state = "sleeping" if present == 1 else f"active({present})"
            else:
                off = field.jumps.offsets()[code]
                kind = "Jump" + json.dumps([int(c) for c in off])
                present -= 1
                state = "empty" if present == 0 else f"active({present})"
            _emit(trace, {"step": step, "site": coords, "instruction": kind, "state": state})
            step += 1


# ---------------------------------------------------------------------------
# trap exploration


@dataclass
class TrapResult:
    """Traps set by the per-particle exploration on the line.

    traps_right / traps_left hold the resting sites in the order they were
    set (moving away from the origin); interdistances pools the gaps between
    consecutive traps on both sides, one entry per successfully trapped
    particle.  escapes counts explorations that drifted off the window on
    the side of their drift (no trap is set for those).
    """

    status: RunStatus
    traps_right: tuple
    traps_left: tuple
    interdistances: np.ndarray
    escapes: int
    reason: str | None
    particles_explored: int

    @property
    def traps(self):
        return tuple(sorted(self.traps_left + self.traps_right))


def trap_explore(cfg, n_particles, field, *, path_budget=4_000_000, trace=None):
    """Walk each particle's would-be path to find a site it can sleep at.

    Particles on the positive half-line are taken nearest-first; each
    exploration reveals instructions along the walk from the particle's
    start until it reaches the previous resting site, and the new resting
    site is the gap site nearest the previous one whose second-to-last
    revealed instruction is a sleep.  The construction is mirrored on the
    negative half-line.  Nothing in cfg is moved: the procedure only reveals
    instructions, and on Success a legal stabilization of cfg on the same
    field never topples the origin.
    """
    domain = cfg.domain
    if domain.dim != 1:
        raise WrongModel("trap exploration is a one-dimensional construction")
    if not isinstance(domain, Window):
        raise WrongModel("trap exploration needs a free-space proxy; use a Window")
    if (cfg.grid == SLEEPING).any():
        raise WrongModel("trap exploration assumes initially active particles")
    radius = domain.radii[0]
    if int(cfg.grid[domain.origin_flat]) != EMPTY:
        return TrapResult(RunStatus.FAILED, (), (), np.empty(0, np.int64), 0, "origin occupied", 0)

    n_sites = domain.n_sites
    reveal = np.zeros(n_sites, dtype=np.int64)
    last_kind = np.full(n_sites, -2, dtype=np.int64)
    prev_kind = np.full(n_sites, -2, dtype=np.int64)
    path = np.empty(path_budget, dtype=np.int64)
    seed, q, cumw, jumps_only, _inf = _field_args(field)
    skeys = domain.site_keys()
    drift = float(field.jumps.drift()[0])

    occupied = np.flatnonzero(cfg.grid >= 1)
    starts_right = []
    for f in occupied:
        c = int(f) - radius
        if c > 0:
            starts_right.extend([c] * int(cfg.grid[f]))
    starts_left = []
    for f in occupied[::-1]:
        c = int(f) - radius
        if c < 0:
            starts_left.extend([c] * int(cfg.grid[f]))
    starts_right = starts_right[: int(n_particles)]
    starts_left = starts_left[: int(n_particles)]

    inter = []
    escapes = 0
    explored = 0

    def run_side(starts, sign):
        nonlocal escapes, explored
        a_prev = 0
        traps = []
        crossing = 1 if sign > 0 else 0  # jump code pointing back toward a_prev
        for x in starts:
            st, steps = K.explore_1d(
                x + radius, a_prev + radius, reveal, last_kind, prev_kind, path,
                seed, skeys, q, cumw, jumps_only,
            )
            explored += 1
            _emit(trace, {
                "step": explored, "site": [x], "instruction": "explore",
                "state": {0: "stopped", 1: "path budget", 2: "left window"}[st],
            })
            if st == K.E_BUDGET:
                return traps, a_prev, "exploration path budget exhausted"
            if st == K.E_ESCAPED:
                if (sign > 0 and drift > 0) or (sign < 0 and drift < 0):
                    # the walk is transient in that direction: no trap is set
                    # and the next exploration still stops at a_prev
                    escapes += 1
                    continue
                return traps, a_prev, "explorer left the window"
            found = None
            for c in range(a_prev + sign, x, sign):
                idx = c + radius
                # the explorer crossed every gap site on its way to a_prev,
                # so the top of each stack there is the crossing jump
                assert reveal[idx] > 0, "gap site never visited"
                assert last_kind[idx] == crossing, "gap site top is not the crossing jump"
                if found is None and prev_kind[idx] == -1:
                    found = c
            if found is None:
                return traps, a_prev, "no sleep instruction under the top of any gap site"
            idx = found + radius
            seg = path[:steps]
            hits = np.flatnonzero(seg == idx)
            # the sleep that forms the trap and the crossing jump above it
            # are consecutive reveals at the resting site
            assert hits.size >= 2 and hits[-1] == hits[-2] + 1
            tail = seg[hits[-2] + 1 :]
            # instructions revealed after the trap sleep was passed must sit
            # strictly between the previous resting site and the new one
            if sign > 0:
                assert tail.min() >= a_prev + 1 + radius and tail.max() <= idx
            else:
                assert tail.max() <= a_prev - 1 + radius and tail.min() >= idx
            traps.append(found)
            inter.append(abs(found - a_prev))
            _emit(trace, {"step": explored, "site": [found], "instruction": "trap",
                          "state": "set"})
            a_prev = found
        return traps, a_prev, None

    traps_right, _, reason_r = run_side(starts_right, +1)
    reason_l = None
    if reason_r is None:
        traps_left, _, reason_l = run_side(starts_left, -1)
    else:
        traps_left = []
    reason = reason_r or reason_l
    status = RunStatus.SUCCESS if reason is None else RunStatus.FAILED

    touched = np.flatnonzero(reveal)
    for f in touched:
        field.mark_revealed(domain.coords_of(int(f)), int(reveal[f]))
    return TrapResult(
        status, tuple(traps_right), tuple(traps_left),
        np.asarray(inter, dtype=np.int64), escapes, reason, explored,
    )


# ---------------------------------------------------------------------------
# ordered drive along a direction


@dataclass
class SafeZoneResult:
    """Counts from driving particles through the volume in projection order.

    exit_count is the number of particles that left through the kill
    boundary; left_behind the number that ended asleep inside.  Their sum is
    the initial particle count.  steps_with_sleeper counts processed sites
    whose walk put at least one particle to sleep (the per-step event the
    half-space killing probability bounds).
    """

    exit_count: int
    left_behind: int
    steps_processed: int
    steps_with_sleeper: int
    toppling_log: list
    status: RunStatus
    cfg: Configuration
    odometer: Odometer


def safe_zone_drive(cfg, v, field, *, budget=DEFAULT_BUDGET, trace=None):
    """Process sites by increasing projection on v, walking each particle out.

    Sites are ranked by x.v with lexicographic tie-breaking.  The particle
    at the current site is toppled legally until it exits the volume, rests
    at a not-yet-processed unoccupied site (where it waits its turn), or
    falls asleep in the already-processed region.  Waking a sleeper resumes
    legal topplings until every disturbed site is resolved the same way.
    """
    domain = cfg.domain
    if domain.boundary_code != B_KILL:
        raise WrongModel("the drive counts exits; use a kill-boundary box")
    if field.jumps.dim != domain.dim:
        raise InvalidVolume("jump distribution dimension does not match domain")
    grid = cfg.grid
    if np.any((grid != EMPTY) & (grid != 1)):
        raise NonBinaryInput("the drive needs at most one active particle per site")
    direction = np.asarray(v, dtype=np.float64).reshape(-1)
    if direction.shape[0] != domain.dim or not direction.any():
        raise InvalidSpec("direction vector must be nonzero with one entry per axis")

    coords = domain.all_coords()
    proj = coords @ direction
    order = np.lexsort(tuple(coords[:, a] for a in range(domain.dim - 1, -1, -1)) + (proj,))
    rank = np.empty(domain.n_sites, dtype=np.int64)
    rank[order] = np.arange(domain.n_sites, dtype=np.int64)

    shape, strides, boundary, skeys = _geometry(domain)
    seed, q, cumw, jumps_only, inf_sleep = _field_args(field)
    offsets = field._offsets
    odo = Odometer(domain)
    log = []
    initial_total = int(cfg.total)
    exits = 0
    stuck_total = 0
    steps_done = 0
    steps_sleepy = 0
    spent = 0
    status = RunStatus.SUCCESS

    for i, f in enumerate(order):
        if grid[f] < 1:
            continue
        steps_done += 1
        step_stuck = 0
        stack = [int(f)]
        while stack:
            c = stack[-1]
            code = int(grid[c])
            if code <= 0 or (code == 1 and rank[c] > i):
                stack.pop()
                continue
            if spent >= budget:
                status = RunStatus.BUDGET_EXCEEDED
                break
            res, t = K.topple_flat(
                grid, odo.counts, odo.jump_counts, odo.inflow, c,
                shape, strides, boundary, offsets, seed, skeys, q, cumw,
                jumps_only, inf_sleep,
            )
            spent += 1
            log.append(c)
            if trace is not None:
                kind = "Sleep" if res == K.R_SLEPT else "Jump"
                _emit(trace, {
                    "step": spent, "site": [int(x) for x in domain.coords_of(c)],
                    "instruction": kind, "state": int(grid[c]),
                })
            if res == K.R_KILLED:
                exits += 1
                cfg.total -= 1
            elif res == K.R_SLEPT and grid[c] == SLEEPING:
                stuck_total += 1
                step_stuck += 1
            elif res == K.R_MOVED:
                stack.append(int(t))
        if step_stuck:
            steps_sleepy += 1
        if status is not RunStatus.SUCCESS:
            break

    left = int(np.count_nonzero(grid == SLEEPING))
    if status is RunStatus.SUCCESS:
        assert not (grid >= 1).any(), "drive finished with an active particle"
        assert exits == initial_total - left, "drive lost track of a particle"
    for f in np.flatnonzero(odo.counts):
        field.mark_revealed(domain.coords_of(int(f)), int(odo.counts[f]))
    return SafeZoneResult(
        exits, left, steps_done, steps_sleepy, log, status, cfg, odo,
    )


# ---------------------------------------------------------------------------
# killed-walk probability


@dataclass
class KilledWalkEstimate:
    """Monte Carlo estimate of the chance the walk is ever killed.

    The walk starts at the origin and is exposed to killing (probability
    sleep/(1+sleep intensity) per step) whenever its projection on the
    direction is <= 0.  Truncation at the horizon, and the drift-based early
    exit, can only miss later kills, so the estimate is biased low; the
    magnitude is controlled by the transience of the walk.
    """

    estimate: float
    stderr: float
    replicas: int
    horizon: int
    early_exit_margin: float
    truncation_note: str = "horizon truncation undercounts the killing probability"


def killed_walk_prob(jumps, v, lam, replicas=100_000, horizon=100_000, seed=0):
    """Probability a rate-1 walk is ever killed at rate lam on {z : z.v <= 0}."""
    if lam < 0:
        raise InvalidSpec("killing intensity must be >= 0")
    if replicas < 1 or horizon < 1:
        raise InvalidSpec("replicas and horizon must be positive")
    direction = np.asarray(v, dtype=np.float64).reshape(-1)
    if direction.shape[0] != jumps.dim or not direction.any():
        raise InvalidSpec("direction vector must be nonzero with one entry per axis")
    if lam == 0:
        return KilledWalkEstimate(0.0, 0.0, int(replicas), int(horizon), 0.0,
                                  "killing at intensity 0 never happens")
    qkill = 1.0 if lam == float("inf") else lam / (1.0 + lam)
    vproj = jumps.offsets().astype(np.float64) @ direction
    weights = np.asarray(jumps.weights, dtype=np.float64)
    drift_proj = float(weights @ vproj)
    margin = 0.0
    if drift_proj > 0:
        second_moment = float(weights @ (vproj * vproj))
        margin = 16.0 * second_moment / drift_proj + 4.0 * float(np.abs(vproj).max())
    kills = K.killed_walk_kernel(
        int(replicas), int(horizon), u64(seed), qkill, jumps.cum_weights(), vproj, margin
    )
    p_hat = kills / replicas
    se = float(np.sqrt(p_hat * (1.0 - p_hat) / replicas))
    return KilledWalkEstimate(float(p_hat), se, int(replicas), int(horizon), margin)


# ---------------------------------------------------------------------------
# single-block throughput functions


@dataclass
class BlockFunctions:
    """Exit/sleep tallies of a block fed m particles at its center.

    Index m of each array describes the stable state after m particles were
    added at the center on top of the starting configuration: left_exits and
    right_exits count particles parked at the two buffer cells just outside
    the block, sleepers counts particles asleep inside it, totals their sum.
    Computed incrementally; by commutativity this matches a fresh run at
    each m.
    """

    half_width: int
    left_exits: np.ndarray
    right_exits: np.ndarray
    sleepers: np.ndarray
    totals: np.ndarray
    status: StabilizeStatus


def block_functions(half_width, block_cfg, field, m_max, *, budget=DEFAULT_BUDGET,
                    strategy=None):
    """Feed 0..m_max particles to the block center, restabilizing after each."""
    width = int(half_width)
    if width < 2:
        raise InvalidSpec("block half-width must be >= 2")
    if m_max < 0:
        raise InvalidSpec("m_max must be >= 0")
    domain = block_cfg.domain
    if not (isinstance(domain, Window) and domain.dim == 1 and domain.radii == (width,)):
        raise InvalidSpec("block configuration must live on a 1-d window of the block's half-width")
    left_buf = 0
    right_buf = 2 * width
    if int(block_cfg.grid[left_buf]) != EMPTY or int(block_cfg.grid[right_buf]) != EMPTY:
        raise InvalidSpec("the buffer cells outside the block must start empty")

    interior = np.arange(1, 2 * width, dtype=np.int64)
    cfg = block_cfg.copy()
    odo = Odometer(domain)
    initial_total = int(cfg.total)
    m_count = int(m_max) + 1
    left_exits = np.zeros(m_count, dtype=np.int64)
    right_exits = np.zeros(m_count, dtype=np.int64)
    sleepers = np.zeros(m_count, dtype=np.int64)
    status = StabilizeStatus.STABLE
    done = 0
    for m in range(m_count):
        if m:
            cfg.add_at((0,))
        remaining = max(budget - int(odo.counts.sum()), 0)
        cfg, odo, status = stabilize(cfg, interior, field, strategy, budget=remaining, odo=odo)
        if not status:
            break
        left_exits[m] = count_of(int(cfg.grid[left_buf]))
        right_exits[m] = count_of(int(cfg.grid[right_buf]))
        sleepers[m] = int(np.count_nonzero(cfg.grid[interior] == SLEEPING))
        done = m + 1
    left_exits = left_exits[:done]
    right_exits = right_exits[:done]
    sleepers = sleepers[:done]
    totals = left_exits + right_exits + sleepers
    expected = initial_total + np.arange(done, dtype=np.int64)
    assert (totals == expected).all(), "block lost or created particles"
    return BlockFunctions(width, left_exits, right_exits, sleepers, totals, status)


# ---------------------------------------------------------------------------
# destruction urn


@dataclass
class UrnState:
    """Final state of the two-color destruction urn.

    Each turn samples a color with probability proportional to its count and
    destroys a Geometric(destruction_param) number (support 1, 2, ...) of
    the opposite color; turns is the first turn at which a count reached 0.
    """

    count_a: int
    count_b: int
    turns: int
    destruction_param: float

    @property
    def stop_turn(self):
        return self.turns


def urn_run(r, destruction_param, seed):
    """Run the urn from r balls of each color until one color is exhausted."""
    size = int(r)
    p = float(destruction_param)
    if size < 1:
        raise InvalidSpec("urn must start with at least one ball per color")
    if not 0.0 < p < 1.0:
        raise InvalidSpec("destruction parameter must lie strictly inside (0, 1)")
    state = u64(derive_seed(u64(seed), 0))
    a, b, k = K.urn_kernel(size, p, state)
    return UrnState(int(a), int(b), int(k), p)


# ---------------------------------------------------------------------------
# returns to the starting site


@dataclass
class GreenEstimate:
    """Mean visits of the walk to its start (time 0 included), truncated."""

    estimate: float
    stderr: float
    replicas: int
    horizon: int
    truncation_note: str = "horizon truncation undercounts the true mean"


def green_function_estimate(jumps, replicas=20_000, horizon=10_000, seed=0):
    """Monte Carlo mean number of visits to the starting site.

    Warns (NotTransient) for d <= 2, where the untruncated mean may be
    infinite and the truncated estimate is horizon-dependent.
    """
    if replicas < 2 or horizon < 1:
        raise InvalidSpec("need at least 2 replicas and a positive horizon")
    if jumps.dim <= 2:
        warnings.warn(
            "walks in d <= 2 may be recurrent: the visit count estimate is "
            "horizon-dependent", NotTransient, stacklevel=2,
        )
    visits = np.empty(int(replicas), dtype=np.int64)
    K.green_kernel(int(replicas), int(horizon), u64(seed), jumps.cum_weights(),
                   jumps.offsets(), visits)
    est = float(visits.mean())
    se = float(visits.std(ddof=1) / np.sqrt(replicas))
    return GreenEstimate(est, se, int(replicas), int(horizon))
