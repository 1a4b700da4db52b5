"""Event-driven continuous-time runs and labeled particle tracking.

ct_run drives a finite configuration with per-site exponential clocks that
consume the same instruction stacks as the engine, so an absorbing run must
reproduce the engine's stable state and odometer exactly.  particlewise_run
tracks labeled particles along putative walks with individual sleep clocks;
its unlabeled projection realizes the same law.  exit_counts compares
boundary-kill exits against free-evolution exits of the labeled system.
"""

from dataclasses import dataclass
import heapq
import json
import math
import warnings

import numpy as np

from . import _kernels as K
from .engine import Odometer, _field_args, _geometry, stabilize
from .errors import (
    InvalidSpec,
    InvalidVolume,
    ProxyTooSmall,
    RunStatus,
    WrongModel,
)
from .model import (
    B_KILL,
    SLEEPING,
    Box,
    Configuration,
    Torus,
    Window,
)
from .rng import chain, site_key, stream_u01, u64

_TINY = 1e-300


def _exp_gap(state, rate):
    """Advance a stream state and draw an Exp(rate) gap (strictly positive)."""
    state, u = stream_u01(u64(state))
    gap = -math.log1p(-u) / rate
    return state, max(gap, _TINY)


# ---------------------------------------------------------------------------
# site-clock continuous time


class ClockField:
    """Per-site ringing times: a rate-(1+lam)*activeCount Poisson stream.

    Realized by memoryless rearming: whenever a site's active count changes
    (or its own ring fires), the next ring is redrawn at the current rate
    from the site's deterministic draw stream.  Draw counters persist on the
    instance, so event times are a pure function of (seed, run history).
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._useed = u64(seed)
        self.draws = {}

    def next_delay(self, skey, flat, rate):
        ctr = self.draws.get(flat, 0)
        self.draws[flat] = ctr + 1
        state = u64(chain(u64(chain(self._useed, skey)), u64(ctr)))
        _state, u = stream_u01(state)
        return max(-math.log1p(-u) / rate, _TINY)


@dataclass
class CtResult:
    """Trajectory of (time, site, instruction) plus the final state.

    On absorption before t_max, final_cfg and odometer are exactly what the
    engine's stabilize produces from the same configuration and field.
    """

    trajectory: list
    final_cfg: Configuration
    odometer: Odometer
    status: RunStatus
    final_time: float


def ct_run(cfg, field, clocks, t_max, trace=None):
    """Run the site-clock dynamics until absorption or t_max.

    Each ring of a site's clock consumes that site's next instruction (an
    overridden sleep is a no-op but still consumes).  Rings occur at rate
    (1+lam) per active particle, so instruction marginals match the stacks.
    """
    if field.params.is_infinite:
        raise WrongModel("site clocks need a finite sleep intensity")
    domain = cfg.domain
    if field.jumps.dim != domain.dim:
        raise InvalidSpec("jump distribution dimension does not match domain")
    lam = field.params.lam
    rate_per_particle = 1.0 + lam
    shape, strides, boundary, skeys = _geometry(domain)
    seed, q, cumw, jumps_only, inf_sleep = _field_args(field)
    offsets = field._offsets
    odo = Odometer(domain)
    grid = cfg.grid

    heap = []
    token = np.zeros(domain.n_sites, dtype=np.int64)

    def arm(f, now):
        n_act = int(grid[f])
        if n_act < 1:
            return
        token[f] += 1
        delay = clocks.next_delay(skeys[f], int(f), rate_per_particle * n_act)
        heapq.heappush(heap, (now + delay, int(f), int(token[f])))

    for f in np.flatnonzero(grid >= 1):
        arm(int(f), 0.0)

    trajectory = []
    now = 0.0
    while heap:
        t, f, tok = heapq.heappop(heap)
        if tok != token[f] or grid[f] < 1:
            continue
        if t > t_max:
            heapq.heappush(heap, (t, f, tok))
            break
        now = t
        coords = domain.coords_of(f)
        slot = int(odo.counts[f]) + 1
        code = field.code_at(coords, slot)
        kind = "Sleep" if code < 0 else "Jump" + json.dumps(
            [int(c) for c in field.jumps.offsets()[code]]
        )
        res, tgt = K.topple_flat(
            grid, odo.counts, odo.jump_counts, odo.inflow, f,
            shape, strides, boundary, offsets, seed, skeys, q, cumw,
            jumps_only, inf_sleep,
        )
        trajectory.append((now, tuple(int(c) for c in coords), kind))
        if trace is not None:
            trace.write(json.dumps({
                "t": now, "event": "ring",
                "site": [int(c) for c in coords], "instruction": kind,
            }) + "\n")
        if res == K.R_KILLED:
            cfg.total -= 1
        elif res == K.R_OVERRUN:
            raise InvalidVolume("window too small: jump target outside the array")
        field.mark_revealed(coords, int(odo.counts[f]))
        # memoryless rearming: both touched sites redraw at their new rates;
        # arm() bumps the token, so any stale heap entry is skipped
        arm(f, now)
        if res == K.R_MOVED and tgt != f:
            arm(int(tgt), now)

    absorbed = not (grid >= 1).any()
    status = RunStatus.SUCCESS if absorbed else RunStatus.UNABSORBED
    return CtResult(trajectory, cfg, odo, status, now)


# ---------------------------------------------------------------------------
# labeled particle system


@dataclass
class Particle:
    """One labeled particle and its private streams.

    The position always equals the putative walk at the particle's inner
    time; sleeping freezes the inner time, so the walk resumes where it
    paused.  next_jump/next_sleep are inner-time marks of the pending
    events of the two clocks.
    """

    ident: tuple
    pos: tuple
    state: str  # "active" | "sleeping" | "escaped"
    sigma: float
    next_jump: float
    next_sleep: float
    jump_state: object
    dir_state: object
    sleep_state: object
    first_exit_time: float | None = None
    first_exit_pos: tuple | None = None
    jumps_taken: int = 0


class LabeledSystem:
    """Seeded factory and container for labeled-particle runs."""

    def __init__(self, seed, params, jumps):
        if params.is_infinite:
            raise WrongModel("labeled sleep clocks need a finite sleep intensity")
        self.seed = int(seed)
        self.params = params
        self.jumps = jumps
        self.particles = []

    def spawn(self, cfg):
        """Create particles for every particle in cfg (actives only)."""
        if (cfg.grid == SLEEPING).any():
            raise WrongModel("labeled runs start from fully active configurations")
        useed = u64(self.seed)
        lam = self.params.lam
        out = []
        for f in np.flatnonzero(cfg.grid >= 1):
            coords = tuple(int(c) for c in cfg.domain.coords_of(int(f)))
            skey = u64(site_key(np.asarray(coords, dtype=np.int64)))
            for j in range(1, int(cfg.grid[f]) + 1):
                base = u64(chain(u64(chain(useed, skey)), u64(j)))
                jump_state = u64(chain(base, u64(1)))
                dir_state = u64(chain(base, u64(2)))
                sleep_state = u64(chain(base, u64(3)))
                jump_state, gap_j = _exp_gap(jump_state, 1.0)
                sleep_state, gap_s = _exp_gap(sleep_state, lam)
                out.append(Particle(
                    ident=(coords, j), pos=coords, state="active", sigma=0.0,
                    next_jump=gap_j, next_sleep=gap_s,
                    jump_state=jump_state, dir_state=dir_state,
                    sleep_state=sleep_state,
                ))
        self.particles = out
        return out


@dataclass
class LabeledRunResult:
    """Final labeled state plus per-particle exit records."""

    system: LabeledSystem
    exit_log: list
    status: RunStatus
    final_time: float
    edge_touched: bool
    final_cfg: Configuration


def _check_labels(particles, site_map, total):
    # unlabeled projection: per-site tallies must match particle positions
    tally = {}
    alive = 0
    for i, p in enumerate(particles):
        if p.state == "escaped":
            continue
        alive += 1
        tally[p.pos] = tally.get(p.pos, 0) + 1
    assert tally == {pos: len(ids) for pos, ids in site_map.items() if ids}, \
        "labeled projection out of sync"
    escaped = sum(1 for p in particles if p.state == "escaped")
    assert alive + escaped == total, "labeled run lost a particle"
    for p in particles:
        if p.state == "sleeping":
            assert len(site_map[p.pos]) == 1, "a sleeper is sharing a site"


def particlewise_run(cfg, system, t_max, watch_radii=None, trace=None):
    """Run the labeled dynamics until no active particle remains or t_max.

    Active particles jump along their putative walks at rate 1 and attempt
    sleep at rate lam (effective only when alone); an arrival wakes a
    sleeping particle.  On a Window domain, a particle stepping outside the
    array is marked escaped and stops being simulated; touching the outer
    ring sets edge_touched so callers can enlarge their proxy.
    """
    domain = cfg.domain
    if not isinstance(domain, (Window, Torus)):
        raise WrongModel("labeled runs support Window and Torus domains")
    if system.jumps.dim != domain.dim:
        raise InvalidSpec("jump distribution dimension does not match domain")
    particles = system.spawn(cfg)
    offsets = system.jumps.offsets()
    cumw = system.jumps.cum_weights()
    n_off = len(offsets)
    total = len(particles)
    is_torus = isinstance(domain, Torus)
    if is_torus:
        side = domain.side
    else:
        radii = domain.radii

    site_map = {}
    for i, p in enumerate(particles):
        site_map.setdefault(p.pos, []).append(i)

    def watch_inside(pos):
        return all(abs(c) <= r for c, r in zip(pos, watch_radii))

    heap = []
    token = [0] * total

    def arm(i, now):
        p = particles[i]
        token[i] += 1
        nxt = now + min(p.next_jump, p.next_sleep) - p.sigma
        heapq.heappush(heap, (nxt, i, token[i]))

    for i in range(total):
        arm(i, 0.0)

    edge_touched = False
    exit_log = []
    now = 0.0
    while heap:
        t, i, tok = heapq.heappop(heap)
        if tok != token[i]:
            continue
        if t > t_max:
            heapq.heappush(heap, (t, i, tok))
            break
        now = t
        p = particles[i]
        assert p.state == "active", "scheduled event on a non-active particle"
        if p.next_jump <= p.next_sleep:
            # putative jump
            p.sigma = p.next_jump
            p.jump_state, gap = _exp_gap(p.jump_state, 1.0)
            p.next_jump += gap
            p.dir_state, u = stream_u01(u64(p.dir_state))
            k = 0
            while k < n_off - 1 and u >= cumw[k]:
                k += 1
            new_pos = tuple(int(c) + int(o) for c, o in zip(p.pos, offsets[k]))
            if is_torus:
                new_pos = tuple(c % side for c in new_pos)
            site_map[p.pos].remove(i)
            if not site_map[p.pos]:
                del site_map[p.pos]
            p.jumps_taken += 1
            if not is_torus and any(abs(c) > r for c, r in zip(new_pos, radii)):
                p.state = "escaped"
                p.pos = new_pos
                token[i] += 1
                if trace is not None:
                    trace.write(json.dumps({
                        "t": now, "event": "escape", "particle": list(p.ident[0]) + [p.ident[1]],
                        "instruction": "Jump" + json.dumps([int(o) for o in offsets[k]]),
                    }) + "\n")
            else:
                p.pos = new_pos
                occupants = site_map.setdefault(new_pos, [])
                for idx in occupants:
                    q_ = particles[idx]
                    if q_.state == "sleeping":
                        q_.state = "active"
                        arm(idx, now)
                        if trace is not None:
                            trace.write(json.dumps({
                                "t": now, "event": "wake",
                                "particle": list(q_.ident[0]) + [q_.ident[1]],
                            }) + "\n")
                occupants.append(i)
                if not is_torus and any(abs(c) == r for c, r in zip(new_pos, radii)):
                    edge_touched = True
                arm(i, now)
                if trace is not None:
                    trace.write(json.dumps({
                        "t": now, "event": "jump",
                        "particle": list(p.ident[0]) + [p.ident[1]],
                        "site": list(new_pos),
                        "instruction": "Jump" + json.dumps([int(o) for o in offsets[k]]),
                    }) + "\n")
            if watch_radii is not None and p.first_exit_time is None \
                    and not watch_inside(p.pos):
                p.first_exit_time = now
                p.first_exit_pos = p.pos
                exit_log.append({"particle": p.ident, "time": now, "pos": p.pos})
        else:
            # sleep attempt
            p.sigma = p.next_sleep
            p.sleep_state, gap = _exp_gap(p.sleep_state, system.params.lam)
            p.next_sleep += gap
            if len(site_map[p.pos]) == 1:
                p.state = "sleeping"
                token[i] += 1
                if trace is not None:
                    trace.write(json.dumps({
                        "t": now, "event": "sleep",
                        "particle": list(p.ident[0]) + [p.ident[1]],
                        "site": list(p.pos), "instruction": "Sleep",
                    }) + "\n")
            else:
                arm(i, now)
        _check_labels(particles, site_map, total)

    active_left = any(p.state == "active" for p in particles)
    status = RunStatus.UNABSORBED if active_left else RunStatus.SUCCESS

    final = Configuration.empty(domain)
    for p in particles:
        if p.state == "escaped":
            continue
        f = domain.flat_index(p.pos)
        if p.state == "sleeping":
            final.grid[f] = SLEEPING
        else:
            final.grid[f] = max(int(final.grid[f]), 0) + 1
        final.total += 1
    return LabeledRunResult(system, exit_log, status, now, edge_touched, final)


# ---------------------------------------------------------------------------
# kill-boundary exits vs free-evolution exits


@dataclass
class ExitCounts:
    """killed_exits: particles absorbed at the kill boundary by stabilization.
    free_exits: labeled particles that ever left the same region when nothing
    is killed (free evolution on an enclosing window)."""

    killed_exits: int
    free_exits: int
    proxy_radii: tuple
    proxy_retries: int
    kill_status: object
    free_status: RunStatus


def exit_counts(cfg, field, system, t_max, proxy_factor=4, max_retries=2):
    """Compare kill-boundary exits with free-evolution region exits.

    The no-kill evolution is approximated on an enclosing window whose radii
    start at proxy_factor times the region's; if any labeled particle touches
    the window edge, a ProxyTooSmall warning is issued and the window is
    doubled, up to max_retries times.
    """
    domain = cfg.domain
    if not (isinstance(domain, Box) and domain.boundary_code == B_KILL):
        raise InvalidSpec("exit comparison needs the region as a kill-boundary box")
    if system.params != field.params or system.jumps != field.jumps:
        raise InvalidSpec("labeled system and instruction field describe different models")

    kill_cfg = cfg.copy()
    initial = int(kill_cfg.total)
    kill_cfg, _odo, kill_status = stabilize(kill_cfg, None, field)
    killed = initial - int(kill_cfg.total)

    occupied = [
        (tuple(int(c) for c in domain.coords_of(int(f))), int(cfg.grid[f]))
        for f in np.flatnonzero(cfg.grid >= 1)
    ]
    radii = tuple(int(r) * int(proxy_factor) for r in domain.radii)
    retries = 0
    while True:
        wdom = Window(radii)
        wcfg = Configuration.empty(wdom)
        for coords, cnt in occupied:
            for _ in range(cnt):
                wcfg.add_at(coords)
        res = particlewise_run(wcfg, system, t_max, watch_radii=domain.radii)
        if not res.edge_touched:
            break
        warnings.warn(
            f"labeled particle reached the proxy window edge at radii {radii}",
            ProxyTooSmall, stacklevel=2,
        )
        if retries >= max_retries:
            break
        radii = tuple(2 * r for r in radii)
        retries += 1
    free = sum(1 for p in res.system.particles if p.first_exit_time is not None)
    return ExitCounts(killed, free, radii, retries, kill_status, res.status)


def export_trajectory(events, fh):
    """Write ct_run trajectory entries as JSON lines (t, site, instruction)."""
    for t, site, kind in events:
        fh.write(json.dumps({"t": t, "event": "ring", "site": list(site),
                             "instruction": kind}) + "\n")
