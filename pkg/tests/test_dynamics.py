"""Continuous-time and labeled-particle runs.

The site-clock run must reproduce the engine's stable state exactly on
absorption (it is one particular legal toppling order), so those checks are
exact.  Distributional agreement between the two constructions is checked
with a frozen-seed total-variation bound; statistical tolerances elsewhere
were sized from pilot runs and are generous (3 to 5 sigma).
"""

import io
import json
import math
import random
import warnings
from collections import Counter

import numpy as np
import pytest

from arwlab import (
    Box,
    Boundary,
    ClockField,
    Configuration,
    InitialStateSpec,
    InstructionField,
    JumpDistribution,
    LabeledSystem,
    ModelParams,
    RunStatus,
    Torus,
    Window,
    ct_run,
    exit_counts,
    particlewise_run,
    sample_initial,
    stabilize,
)
from arwlab.dynamics import export_trajectory
from arwlab.errors import InvalidSpec, ProxyTooSmall, WrongModel
from arwlab.model import SLEEPING

SYM1 = JumpDistribution.symmetric(1)
DIRECTED = JumpDistribution.directed_1d()
LAM1 = ModelParams(1.0)


def _light_instance(seed):
    # small instances that absorb fast: kill boxes, or sparse tori
    rng = random.Random(seed)
    dim = rng.choice([1, 2])
    lam = rng.choice([0.2, 1.0, 5.0])
    params = ModelParams(lam)
    if dim == 1:
        jumps = rng.choice([SYM1, JumpDistribution(1, (0.7, 0.3))])
    else:
        jumps = rng.choice([JumpDistribution.symmetric(2),
                            JumpDistribution(2, (0.4, 0.2, 0.3, 0.1))])
    if rng.random() < 0.5:
        if dim == 1:
            dom = Box((rng.randint(2, 8),), Boundary.KILL)
        else:
            dom = Box((rng.randint(1, 3),) * 2, Boundary.KILL)
        npart = rng.randint(1, 4)
    else:
        if dim == 1:
            dom = Torus(rng.randint(8, 16))
        else:
            dom = Torus(rng.randint(4, 6), dim=2)
        npart = 1 if lam < 1 else rng.randint(1, 2)
    cfg = Configuration.empty(dom)
    for _ in range(npart):
        cfg.add_at(dom.coords_of(rng.randrange(dom.n_sites)))
    field = InstructionField(rng.randrange(1, 10**6), params, jumps)
    return cfg, field


def test_ct_empty_absorbs_immediately():
    dom = Torus(10)
    res = ct_run(Configuration.empty(dom), InstructionField(1, LAM1, SYM1),
                 ClockField(2), 100.0)
    assert res.status == RunStatus.SUCCESS
    assert res.trajectory == []
    assert res.final_time == 0.0
    assert res.final_cfg.total == 0


def test_ct_matches_engine_on_absorption():
    # the clock order is one legal toppling sequence, so the final
    # configuration and odometer must equal stabilize's output exactly
    for s in range(60):
        cfg, field = _light_instance(s)
        res = ct_run(cfg.copy(), field, ClockField(7_000 + s), 1e6)
        assert res.status == RunStatus.SUCCESS, s
        fresh = InstructionField(field.seed, field.params, field.jumps)
        stab_cfg, stab_odo, stab_status = stabilize(cfg.copy(), None, fresh)
        assert bool(stab_status), s
        assert res.final_cfg == stab_cfg, s
        assert res.odometer == stab_odo, s


def test_ct_single_particle_absorption_time():
    # a lone particle sleeps at the first Sleep ring: rate lam, mean 1/lam
    reps = 4000
    times = []
    for rep in range(reps):
        dom = Box((40,), Boundary.CLOSED)
        cfg = Configuration.empty(dom)
        cfg.add_at((0,))
        res = ct_run(cfg, InstructionField(rep, LAM1, SYM1),
                     ClockField(rep * 7 + 1), 1e6)
        assert res.status == RunStatus.SUCCESS
        times.append(res.final_time)
    arr = np.asarray(times)
    se = arr.std(ddof=1) / math.sqrt(reps)
    assert abs(arr.mean() - 1.0) <= 5 * se


def test_ct_unabsorbed_at_t_max():
    dom = Box((40,), Boundary.CLOSED)
    cfg = Configuration.empty(dom)
    cfg.add_at((0,))
    res = ct_run(cfg, InstructionField(0, ModelParams(0.01), SYM1),
                 ClockField(50), 5.0)
    assert res.status == RunStatus.UNABSORBED
    assert res.final_cfg.total == 1
    assert len(res.trajectory) >= 3
    times = [t for t, _, _ in res.trajectory]
    assert times == sorted(times)
    assert times[-1] <= 5.0


def test_ct_trajectory_tallies_match_odometer():
    dom = Torus(8)
    cfg = Configuration.empty(dom)
    cfg.add_at((1,))
    cfg.add_at((4,))
    res = ct_run(cfg, InstructionField(11, LAM1, SYM1), ClockField(12), 1e6)
    assert res.status == RunStatus.SUCCESS
    all_events = Counter(site for _, site, _ in res.trajectory)
    jump_events = Counter(site for _, site, kind in res.trajectory
                          if kind.startswith("Jump"))
    for f in range(dom.n_sites):
        coords = tuple(dom.coords_of(f))
        assert all_events.get(coords, 0) == res.odometer.counts[f]
        assert jump_events.get(coords, 0) == res.odometer.jump_counts[f]
    # per-site ring times strictly increase
    last = {}
    for t, site, _ in res.trajectory:
        assert t > last.get(site, -1.0)
        last[site] = t


def test_ct_validation():
    dom = Torus(10)
    cfg = Configuration.empty(dom)
    with pytest.raises(WrongModel):
        ct_run(cfg, InstructionField(1, ModelParams(float("inf")), SYM1),
               ClockField(2), 10.0)
    with pytest.raises(InvalidSpec):
        ct_run(cfg, InstructionField(1, LAM1, JumpDistribution.symmetric(2)),
               ClockField(2), 10.0)


def test_export_trajectory_round_trip():
    dom = Torus(8)
    cfg = Configuration.empty(dom)
    cfg.add_at((1,))
    cfg.add_at((4,))
    trace = io.StringIO()
    res = ct_run(cfg, InstructionField(11, LAM1, SYM1), ClockField(12), 1e6,
                 trace=trace)
    out = io.StringIO()
    export_trajectory(res.trajectory, out)
    assert out.getvalue() == trace.getvalue()
    for line in out.getvalue().splitlines():
        ev = json.loads(line)
        assert ev["event"] == "ring"
        assert ev["instruction"] == "Sleep" or ev["instruction"].startswith("Jump")


def test_labeled_single_particle_path_is_its_putative_walk():
    # the walk streams are keyed by (system seed, start site, index), so the
    # same particle must trace the same path on any domain that contains it
    traces = []
    for radius in (60, 200):
        cfg = Configuration.empty(Window((radius,)))
        cfg.add_at((0,))
        buf = io.StringIO()
        res = particlewise_run(cfg, LabeledSystem(8, LAM1, SYM1), 1e6, trace=buf)
        assert res.status == RunStatus.SUCCESS
        traces.append(buf.getvalue())
    assert traces[0] == traces[1]

    events = [json.loads(line) for line in traces[0].splitlines()]
    assert [ev["event"] for ev in events] == ["jump"] * 6 + ["sleep"]
    pos = (0,)
    for ev in events:
        if ev["event"] == "jump":
            off = json.loads(ev["instruction"][len("Jump"):])
            pos = tuple(c + o for c, o in zip(pos, off))
        assert tuple(ev["site"]) == pos

    cfg = Configuration.empty(Window((60,)))
    cfg.add_at((0,))
    res = particlewise_run(cfg, LabeledSystem(8, LAM1, SYM1), 1e6)
    assert res.final_cfg.occupied() == [(pos, int(SLEEPING))]
    assert res.final_cfg.total == 1


def test_labeled_torus_run_replays_cleanly():
    # external replay of the event log: totals conserved, jumps follow the
    # declared offsets, a particle sleeps only while alone, wakes only from
    # sleep, and the final configuration matches the replayed state
    side = 12
    start_counts = ((0,), 2), ((3,), 1), ((7,), 2), ((10,), 1)
    dom = Torus(side)
    cfg = Configuration.empty(dom)
    idents = []
    for coords, cnt in start_counts:
        for j in range(1, cnt + 1):
            cfg.add_at(coords)
            idents.append((coords, j))
    buf = io.StringIO()
    res = particlewise_run(cfg, LabeledSystem(21, ModelParams(0.5), SYM1),
                           1e6, trace=buf)
    assert res.status == RunStatus.SUCCESS

    pos = {ident: ident[0] for ident in idents}
    state = {ident: "active" for ident in idents}
    n_events = 0
    for line in buf.getvalue().splitlines():
        ev = json.loads(line)
        raw = ev["particle"]
        ident = (tuple(raw[:-1]), raw[-1])
        assert ident in pos
        if ev["event"] == "jump":
            assert state[ident] == "active"
            off = json.loads(ev["instruction"][len("Jump"):])
            pos[ident] = tuple((c + o) % side for c, o in zip(pos[ident], off))
            assert tuple(ev["site"]) == pos[ident]
        elif ev["event"] == "sleep":
            assert state[ident] == "active"
            assert tuple(ev["site"]) == pos[ident]
            sharers = [k for k in idents
                       if k != ident and pos[k] == pos[ident]]
            assert not sharers
            state[ident] = "sleeping"
        else:
            assert ev["event"] == "wake"
            assert state[ident] == "sleeping"
            state[ident] = "active"
        assert len(pos) == len(idents)
        n_events += 1
    assert n_events == 38

    grid = np.zeros(dom.n_sites, dtype=res.final_cfg.grid.dtype)
    for ident in idents:
        f = dom.flat_index(pos[ident])
        if state[ident] == "sleeping":
            grid[f] = SLEEPING
        else:
            grid[f] = max(int(grid[f]), 0) + 1
    assert (grid == res.final_cfg.grid).all()
    assert res.final_cfg.total == len(idents)
    assert not res.edge_touched


def test_labeled_unabsorbed_at_t_max():
    dom = Torus(10)
    cfg = Configuration.empty(dom)
    for c in ((0,), (2,), (5,), (8,)):
        cfg.add_at(c)
    res = particlewise_run(cfg, LabeledSystem(3, ModelParams(0.05), SYM1), 2.0)
    assert res.status == RunStatus.UNABSORBED
    assert res.final_time <= 2.0
    assert res.final_cfg.total == 4


def test_labeled_window_escapes_and_exit_log():
    dom = Window((6,))
    cfg = Configuration.empty(dom)
    for c in ((-2,), (0,), (0,), (3,)):
        cfg.add_at(c)
    res = particlewise_run(cfg, LabeledSystem(5, ModelParams(0.2), DIRECTED),
                           1e6, watch_radii=(4,))
    assert res.status == RunStatus.SUCCESS
    escaped = [p for p in res.system.particles if p.state == "escaped"]
    assert len(escaped) == 3
    assert res.final_cfg.total == 4 - len(escaped)
    assert res.edge_touched
    # anyone who left the array certainly left the watched region first
    for p in escaped:
        assert p.first_exit_time is not None
    recorded = [e["particle"] for e in res.exit_log]
    assert len(recorded) == len(set(recorded))
    assert len(recorded) >= len(escaped)
    times = [e["time"] for e in res.exit_log]
    assert times == sorted(times)


def test_labeled_validation():
    dom = Box((5,), Boundary.KILL)
    cfg = Configuration.empty(dom)
    cfg.add_at((0,))
    with pytest.raises(WrongModel):
        particlewise_run(cfg, LabeledSystem(1, LAM1, SYM1), 10.0)
    wdom = Window((5,))
    wcfg = Configuration.empty(wdom)
    with pytest.raises(InvalidSpec):
        particlewise_run(wcfg, LabeledSystem(1, LAM1, JumpDistribution.symmetric(2)), 10.0)
    with pytest.raises(WrongModel):
        LabeledSystem(1, ModelParams(float("inf")), SYM1)
    sleeping = Configuration.empty(wdom)
    sleeping.grid[wdom.flat_index((0,))] = SLEEPING
    sleeping.total = 1
    with pytest.raises(WrongModel):
        LabeledSystem(1, LAM1, SYM1).spawn(sleeping)


def test_site_clock_and_labeled_laws_agree():
    # both constructions realize the same Markov law; compare the empirical
    # distributions of the absorbed configuration on a fixed 3-particle
    # instance (total variation over frozen seeds)
    n = 10_000
    dom = Torus(9)
    start = ((-2 % 9,), (0,), (3,))
    ct_counts = Counter()
    pw_counts = Counter()
    for s in range(n):
        cfg = Configuration.empty(dom)
        for c in start:
            cfg.add_at(c)
        res = ct_run(cfg, InstructionField(50_000 + s, LAM1, SYM1),
                     ClockField(90_000 + s), 1e6)
        assert res.status == RunStatus.SUCCESS
        ct_counts[tuple(int(v) for v in res.final_cfg.grid)] += 1

        cfg = Configuration.empty(dom)
        for c in start:
            cfg.add_at(c)
        pres = particlewise_run(cfg, LabeledSystem(s, LAM1, SYM1), 1e6)
        assert pres.status == RunStatus.SUCCESS
        pw_counts[tuple(int(v) for v in pres.final_cfg.grid)] += 1
    keys = set(ct_counts) | set(pw_counts)
    tv = 0.5 * sum(abs(ct_counts[k] - pw_counts[k]) / n for k in keys)
    assert tv < 0.05


def test_mass_transport_balance_on_torus():
    # translation-invariant start: mean particles sent from a fixed site
    # equals mean received there; paired difference within 3 se of zero
    reps = 400
    diffs = []
    for rep in range(reps):
        dom = Torus(24)
        cfg = sample_initial(InitialStateSpec.iid_bernoulli(0.3), dom, 5_000 + rep)
        res = ct_run(cfg, InstructionField(6_000 + rep, LAM1, SYM1),
                     ClockField(7_000 + rep), 1e7)
        assert res.status == RunStatus.SUCCESS
        diffs.append(int(res.odometer.jump_counts[0]) - int(res.odometer.inflow[0]))
    arr = np.asarray(diffs, dtype=float)
    se = arr.std(ddof=1) / math.sqrt(reps)
    assert abs(arr.mean()) <= 3 * se


def test_exit_counts_empty():
    dom = Box((5,), Boundary.KILL)
    res = exit_counts(Configuration.empty(dom), InstructionField(1, LAM1, SYM1),
                      LabeledSystem(2, LAM1, SYM1), 10.0)
    assert res.killed_exits == 0
    assert res.free_exits == 0


def test_exit_counts_kill_bounded_by_free():
    # directed supercritical regime: killed exits stay below free-evolution
    # exits (within 2 se) and the per-site flux is bounded away from zero
    for n, reps in ((25, 60), (50, 100), (100, 40)):
        kills = []
        frees = []
        for rep in range(reps):
            dom = Box((n,), Boundary.KILL)
            cfg = sample_initial(InitialStateSpec.iid_bernoulli(0.6), dom,
                                 20_000 + rep)
            field = InstructionField(21_000 + rep, LAM1, DIRECTED)
            system = LabeledSystem(22_000 + rep, LAM1, DIRECTED)
            with warnings.catch_warnings():
                warnings.simplefilter("error", ProxyTooSmall)
                res = exit_counts(cfg, field, system, 1e5)
            assert bool(res.kill_status)
            assert res.free_status == RunStatus.SUCCESS
            kills.append(res.killed_exits)
            frees.append(res.free_exits)
        k = np.asarray(kills, dtype=float)
        f = np.asarray(frees, dtype=float)
        se_diff = math.hypot(k.std(ddof=1) / math.sqrt(reps),
                             f.std(ddof=1) / math.sqrt(reps))
        assert k.mean() <= f.mean() + 2 * se_diff, n
        assert k.mean() / (2 * n + 1) >= 0.02, n


def test_exit_counts_validation():
    field = InstructionField(1, LAM1, SYM1)
    system = LabeledSystem(2, LAM1, SYM1)
    with pytest.raises(InvalidSpec):
        exit_counts(Configuration.empty(Window((5,))), field, system, 10.0)
    with pytest.raises(InvalidSpec):
        exit_counts(Configuration.empty(Box((5,), Boundary.CLOSED)), field,
                    system, 10.0)
    dom = Box((5,), Boundary.KILL)
    with pytest.raises(InvalidSpec):
        exit_counts(Configuration.empty(dom), field,
                    LabeledSystem(2, ModelParams(2.0), SYM1), 10.0)
    with pytest.raises(InvalidSpec):
        exit_counts(Configuration.empty(dom), field,
                    LabeledSystem(2, LAM1, DIRECTED), 10.0)


def test_exit_counts_proxy_too_small_warns_and_retries():
    # nearly sleepless directed walkers outrun any finite proxy window
    dom = Box((2,), Boundary.KILL)
    cfg = Configuration.empty(dom)
    cfg.add_at((0,))
    cfg.add_at((1,))
    field = InstructionField(3, ModelParams(0.01), DIRECTED)
    system = LabeledSystem(4, ModelParams(0.01), DIRECTED)
    with pytest.warns(ProxyTooSmall):
        res = exit_counts(cfg, field, system, 500.0)
    assert res.proxy_retries == 2
    assert res.proxy_radii == (32,)
