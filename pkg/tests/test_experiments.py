"""Experiment drivers: declarative specs, drivers, and result tables.

Frozen master seeds make every statistical row reproducible; thresholds
were sized from pilot runs (binomial or batch-means standard errors).
Fixation and activity cannot be observed directly, so the assertions here
check the finite-size proxies the drivers report: non-vanishing origin
odometer tails, exit-flux densities, ring toppling quantiles, retained
mass tails.
"""

import io
import json
import math

import numpy as np
import pytest

from arwlab import (
    ExperimentSpec,
    InitialStateSpec,
    JumpDistribution,
    ResultTable,
    run_condition_b,
    run_condition_e,
    run_condition_u,
    run_driven_dissipative,
    run_fewstay_probe,
    run_phase_scan,
    run_ring,
    run_universality_check,
)
from arwlab.errors import DensityMismatch, InvalidSpec
from arwlab.experiments import Row, calibrate_ring_kappa, run_experiment

SYM1 = JumpDistribution.symmetric(1)
DIRECTED = JumpDistribution.directed_1d()


def _spec(kind="ConditionE", **kw):
    base = dict(
        kind=kind, dim=1, jumps=SYM1, lam=1.0,
        initial=InitialStateSpec.iid_poisson(0.3), sizes=(20,),
        replicas=12, master_seed=7,
    )
    base.update(kw)
    return ExperimentSpec(**base)


def test_spec_validation():
    with pytest.raises(InvalidSpec):
        _spec(kind="NoSuchKind")
    with pytest.raises(InvalidSpec):
        _spec(lam=0.0)
    with pytest.raises(InvalidSpec):
        _spec(lam=-1.0)
    with pytest.raises(InvalidSpec):
        _spec(jumps=JumpDistribution.symmetric(2))
    with pytest.raises(InvalidSpec):
        _spec(sizes=())
    with pytest.raises(InvalidSpec):
        _spec(sizes=(10, 10))
    with pytest.raises(InvalidSpec):
        _spec(sizes=(20, 10))
    with pytest.raises(InvalidSpec):
        _spec(replicas=0)
    with pytest.raises(InvalidSpec):
        _spec(budget=0)


def test_replica_seeds_pure_and_distinct():
    a = _spec(master_seed=123)
    b = _spec(master_seed=123)
    seeds = [a.replica_seed(i) for i in range(200)]
    assert seeds == [b.replica_seed(i) for i in range(200)]
    assert len(set(seeds)) == 200
    assert a.replica_seed(0) != _spec(master_seed=124).replica_seed(0)


def test_spec_resolved_round_trip():
    from arwlab.experiments import spec_from_resolved

    spec = ExperimentSpec(
        "UniversalityCheck", 1, JumpDistribution(1, (0.7, 0.3)), 0.6,
        (InitialStateSpec.iid_poisson(0.6), InitialStateSpec("floor-bernoulli", 0.6)),
        (50, 100), k_grid=(2.0, 50.0), replicas=30, budget=10**6,
        master_seed=99, lam_grid=(0.5,), zeta_grid=(0.3, 0.7),
    )
    header = spec.resolved()
    assert header["lambda"] == "0.59999999999999998"  # 17 significant digits
    rebuilt = spec_from_resolved(header)
    assert rebuilt == spec

    explicit = ExperimentSpec(
        "ConditionE", 1, SYM1, 1.0,
        InitialStateSpec("explicit", sites=(((0,), 2),)), (10,),
    )
    with pytest.raises(InvalidSpec):
        spec_from_resolved(explicit.resolved())


def test_result_table_csv_and_json_round_trip():
    # the ring table exercises None cells (censored medians, blank k)
    spec = _spec(kind="RingFixedEnergy", lam=0.05,
                 initial=InitialStateSpec.iid_poisson(0.5), sizes=(32,),
                 k_grid=(500.0,), replicas=2, master_seed=13, budget=10**4)
    table = run_ring(spec)
    assert any(r.estimate is None for r in table.rows)
    assert any(r.k_or_rho is None for r in table.rows)

    again = ResultTable.from_csv_text(table.to_csv_text())
    assert again == table
    assert again.to_csv_text() == table.to_csv_text()
    jagain = ResultTable.from_json_text(table.to_json_text())
    assert jagain == table
    doc = json.loads(table.to_json_text())
    assert doc["format"] == ResultTable.FORMAT
    assert doc["spec"] == table.header

    with pytest.raises(InvalidSpec):
        ResultTable.from_csv_text("a,b,c\n1,2,3\n")
    with pytest.raises(InvalidSpec):
        ResultTable.from_json_text('{"format": "other", "rows": []}')


def test_tables_deterministic_and_order_insensitive():
    spec = _spec()
    first = run_condition_e(spec)
    assert run_condition_e(spec).to_csv_text() == first.to_csv_text()
    assert run_condition_e(spec).to_json_text() == first.to_json_text()
    # aggregation only depends on the replica index, not execution order
    assert run_condition_e(spec, threads=2) == first


def test_run_experiment_dispatch():
    spec = _spec()
    assert run_experiment(spec) == run_condition_e(spec)
    with pytest.raises(InvalidSpec):
        run_condition_b(spec)
    with pytest.raises(InvalidSpec):
        run_condition_u(spec)
    with pytest.raises(InvalidSpec):
        run_ring(spec)


def test_condition_b_subcritical_directed_origin_stays_small():
    # below the directed critical density the origin odometer profile is
    # non-vanishing for a fixed threshold as the box grows
    spec = ExperimentSpec(
        "ConditionB", 1, DIRECTED, 1.0, InitialStateSpec.iid_bernoulli(0.4),
        (100, 300, 1000), k_grid=(50,), replicas=60, master_seed=2,
    )
    table = run_condition_b(spec)
    assert len(table.rows) == 3
    for row in table.rows:
        assert row.statistic == "P(m(0)<=k)"
        assert row.censored == 0
        assert row.estimate >= 0.2


def test_condition_b_empty_start_never_topples():
    spec = ExperimentSpec(
        "ConditionB", 1, SYM1, 1.0, InitialStateSpec.iid_poisson(0.0),
        (10, 20), k_grid=(0.0,), replicas=15, master_seed=1,
    )
    for row in run_condition_b(spec).rows:
        assert row.estimate == 1.0
        assert row.stderr == 0.0


def test_condition_u_mean_one_positive_variance_stays_active():
    # iid Poisson(1): the origin odometer tail at k ~ sqrt(L) stays large
    spec = ExperimentSpec(
        "ConditionU", 1, SYM1, 1.0, InitialStateSpec.iid_poisson(1.0),
        (25, 50, 100), k_grid=(5, 8, 10), replicas=60, master_seed=3,
    )
    table = run_condition_u(spec)
    for size, k in ((25, 5.0), (50, 8.0), (100, 10.0)):
        (row,) = table.find(size=size, k_or_rho=k)
        assert row.statistic == "P(m(0)>=k)"
        assert row.censored == 0
        assert row.estimate >= 0.5


def test_condition_u_critical_directed_profile_grows():
    # at the exact directed critical density the odometer diverges, so the
    # tail profile grows with the box at every fixed threshold
    spec = ExperimentSpec(
        "ConditionU", 1, DIRECTED, 1.0, InitialStateSpec.iid_bernoulli(0.5),
        (50, 200), k_grid=(1, 5, 10), replicas=80, master_seed=5,
    )
    table = run_condition_u(spec)
    for k in (1.0, 5.0, 10.0):
        small, large = table.find(k_or_rho=k)
        assert small.size == 50 and large.size == 200
        slack = 3 * math.hypot(small.stderr, large.stderr)
        assert large.estimate >= small.estimate - slack


def test_condition_u_empty_start():
    spec = ExperimentSpec(
        "ConditionU", 1, SYM1, 1.0, InitialStateSpec.iid_poisson(0.0),
        (10,), k_grid=(1.0,), replicas=15, master_seed=1,
    )
    (row,) = run_condition_u(spec).rows
    assert row.estimate == 0.0


def test_condition_e_directed_flux_positive():
    spec = ExperimentSpec(
        "ConditionE", 1, DIRECTED, 1.0, InitialStateSpec.iid_poisson(0.6),
        (50, 100, 200), replicas=60, master_seed=4,
    )
    table = run_condition_e(spec)
    assert len(table.rows) == 3
    for row in table.rows:
        assert row.statistic == "E[M]/|V|"
        assert row.k_or_rho is None
        assert row.censored == 0
        assert row.estimate >= 0.05


def test_condition_e_empty_is_exactly_zero():
    spec = ExperimentSpec(
        "ConditionE", 1, DIRECTED, 1.0, InitialStateSpec.iid_poisson(0.0),
        (50,), replicas=10, master_seed=4,
    )
    (row,) = run_condition_e(spec).rows
    assert row.estimate == 0.0
    assert row.stderr == 0.0


def test_condition_e_low_lambda_d3_flux_sustained():
    spec = ExperimentSpec(
        "ConditionE", 3, JumpDistribution.symmetric(3), 0.01,
        InitialStateSpec.iid_poisson(0.5), (4, 6), replicas=20, master_seed=6,
    )
    for row in run_condition_e(spec).rows:
        assert row.censored == 0
        assert row.estimate > 0.1


def test_phase_scan_grid_shape_and_trends():
    spec = ExperimentSpec(
        "PhaseScan", 1, SYM1, 1.0, InitialStateSpec.iid_poisson(0.1),
        (60,), replicas=40, master_seed=18,
        lam_grid=(0.5, 5.0), zeta_grid=(0.3, 0.7),
    )
    table = run_phase_scan(spec)
    assert len(table.rows) == 4
    assert all(r.censored == 0 for r in table.rows)
    est = {(r.lam, r.zeta): (r.estimate, r.stderr) for r in table.rows}
    # flux grows with density at fixed sleep rate
    for lam in (0.5, 5.0):
        lo, lo_se = est[(lam, 0.3)]
        hi, hi_se = est[(lam, 0.7)]
        assert hi - lo > 3 * math.hypot(lo_se, hi_se)
    # and falls with the sleep rate in the denser column
    soft, soft_se = est[(0.5, 0.7)]
    hard, hard_se = est[(5.0, 0.7)]
    assert soft - hard > 3 * math.hypot(soft_se, hard_se)

    with pytest.raises(InvalidSpec):
        run_phase_scan(_spec(kind="PhaseScan"))


def _ring_spec(lam, sizes, k_grid, replicas, master_seed):
    return ExperimentSpec(
        "RingFixedEnergy", 1, SYM1, lam, InitialStateSpec.iid_poisson(0.5),
        sizes, k_grid=k_grid, replicas=replicas, master_seed=master_seed,
        budget=10**7,
    )


def test_ring_fast_phase_within_polylog_bound():
    # pilot at n=64 calibrates the coefficient; at n=128 nearly all replicas
    # finish within kappa * n * log(n)^2 topplings when sleep is strong
    kappa = calibrate_ring_kappa(_ring_spec(20.0, (64,), (), 100, 11))
    assert 1.0 < kappa < 20.0
    n = 128
    bound = kappa * n * math.log(n) ** 2
    table = run_ring(_ring_spec(20.0, (n,), (bound,), 30, 12))
    (tail,) = table.find(statistic="P(T<=k)")
    assert tail.censored == 0
    assert tail.estimate >= 0.9
    (median,) = table.find(statistic="T_median")
    assert median.estimate is not None
    assert median.estimate <= bound


def test_ring_slow_phase_hits_budget():
    kappa_bound = 4.7 * 128 * math.log(128) ** 2
    table = run_ring(_ring_spec(0.05, (128,), (kappa_bound,), 6, 13))
    (tail,) = table.find(statistic="P(T<=k)")
    (median,) = table.find(statistic="T_median")
    (frac,) = table.find(statistic="censored_fraction")
    assert tail.censored == 6
    # censored replicas sit above every threshold, never below it
    assert tail.estimate == 0.0
    assert median.estimate is None
    assert frac.estimate == 1.0


def test_ring_empty_draw_trivially_stable():
    table = run_ring(ExperimentSpec(
        "RingFixedEnergy", 1, SYM1, 1.0, InitialStateSpec.iid_poisson(0.0),
        (8,), k_grid=(10.0,), replicas=10, master_seed=2,
    ))
    (tail,) = table.find(statistic="P(T<=k)")
    (median,) = table.find(statistic="T_median")
    assert tail.estimate == 1.0
    assert median.estimate == 0.0


def test_ring_validation():
    with pytest.raises(InvalidSpec):
        run_ring(ExperimentSpec(
            "RingFixedEnergy", 1, DIRECTED, 1.0,
            InitialStateSpec.iid_poisson(0.5), (16,),
        ))
    with pytest.raises(InvalidSpec):
        run_ring(ExperimentSpec(
            "RingFixedEnergy", 1, SYM1, 1.0, InitialStateSpec.iid_poisson(0.5),
            (16,), k_grid=(10**8,), budget=10**7,
        ))
    # a calibration pilot where every replica blows the budget is an error
    with pytest.raises(InvalidSpec):
        calibrate_ring_kappa(ExperimentSpec(
            "RingFixedEnergy", 1, SYM1, 0.05, InitialStateSpec.iid_poisson(0.5),
            (128,), replicas=2, master_seed=3, budget=10**5,
        ))


def test_driven_dissipative_single_site_matches_chain_oracle():
    # the single-site chain is explicit: after each addition the lone
    # particle sleeps with probability q = lam/(1+lam) before jumping out,
    # regardless of the previous state; solve that two-state chain directly
    lam = 1.0
    q = lam / (1.0 + lam)
    transition = np.array([[1 - q, q], [1 - q, q]])
    evals, evecs = np.linalg.eig(transition.T)
    pi = np.real(evecs[:, np.argmax(np.real(evals))])
    pi /= pi.sum()
    oracle_mean = float(pi[1])
    assert abs(oracle_mean - q) < 1e-12

    trace = io.StringIO()
    spec = ExperimentSpec(
        "DrivenDissipative", 1, SYM1, lam, InitialStateSpec.iid_poisson(0.0),
        (0,), replicas=4000, master_seed=14,
    )
    (row,) = run_driven_dissipative(spec, trace=trace).rows
    assert row.censored == 0
    assert abs(row.estimate - oracle_mean) <= 3 * row.stderr

    lines = trace.getvalue().splitlines()
    assert len(lines) == 4000
    first = json.loads(lines[0])
    assert set(first) == {"size", "step", "density"}
    assert all(json.loads(l)["density"] in (0.0, 1.0) for l in lines)


def test_driven_dissipative_density_in_unit_interval():
    spec = ExperimentSpec(
        "DrivenDissipative", 1, DIRECTED, 1.0, InitialStateSpec.iid_poisson(0.0),
        (50,), replicas=300, master_seed=15,
    )
    (row,) = run_driven_dissipative(spec).rows
    assert row.statistic == "stationary_density"
    assert row.zeta is None
    assert 0.0 <= row.estimate <= 1.0


def test_universality_same_density_laws_agree():
    spec = ExperimentSpec(
        "UniversalityCheck", 1, DIRECTED, 1.0,
        (InitialStateSpec.iid_poisson(0.6),
         InitialStateSpec("floor-bernoulli", 0.6)),
        (200,), replicas=60, master_seed=16,
    )
    rows = run_universality_check(spec).rows
    assert {r.statistic for r in rows} == {
        "E[M]/|V|[poisson]", "E[M]/|V|[floor-bernoulli]",
    }
    for row in rows:
        assert row.estimate >= 0.05
    gap = abs(rows[0].estimate - rows[1].estimate)
    assert gap <= 3 * math.hypot(rows[0].stderr, rows[1].stderr)


def test_universality_trivial_laws():
    zero = ExperimentSpec(
        "UniversalityCheck", 1, SYM1, 1.0,
        (InitialStateSpec.iid_poisson(0.0), InitialStateSpec("deterministic", 0.0)),
        (20,), replicas=10, master_seed=8,
    )
    for row in run_universality_check(zero).rows:
        assert row.estimate == 0.0

    # one particle everywhere with instant sleep: stable at time zero
    stable = ExperimentSpec(
        "UniversalityCheck", 1, SYM1, float("inf"),
        (InitialStateSpec("deterministic", 1.0),
         InitialStateSpec("floor-bernoulli", 1.0)),
        (30,), replicas=20, master_seed=9,
    )
    for row in run_universality_check(stable).rows:
        assert row.estimate == 0.0
        assert row.stderr == 0.0
        assert row.censored == 0


def test_universality_validation():
    with pytest.raises(DensityMismatch):
        run_universality_check(ExperimentSpec(
            "UniversalityCheck", 1, SYM1, 1.0,
            (InitialStateSpec.iid_poisson(0.5), InitialStateSpec.iid_bernoulli(0.6)),
            (20,),
        ))
    with pytest.raises(InvalidSpec):
        run_universality_check(ExperimentSpec(
            "UniversalityCheck", 1, SYM1, 1.0,
            InitialStateSpec.iid_poisson(0.5), (20,),
        ))


def test_fewstay_retained_mass_decays_geometrically():
    # small sleep rate: the killed interval keeps >= 0.2 r particles with
    # probability decaying like exp(-c r); two doublings must shrink the
    # tail below 0.7 per doubling on aggregate
    estimates = {}
    for length, replicas, master in ((64, 3000, 20), (128, 3000, 21), (256, 1500, 22)):
        spec = ExperimentSpec(
            "FewStayProbe", 1, SYM1, 0.02, InitialStateSpec.iid_poisson(0.5),
            (length,), k_grid=(0.2,), replicas=replicas, master_seed=master,
        )
        (row,) = run_fewstay_probe(spec).rows
        assert row.statistic == "P(mass>=rho*r)"
        assert row.censored == 0
        estimates[length] = row.estimate
    assert estimates[64] > estimates[128] > estimates[256]
    assert estimates[256] / estimates[64] < 0.49


def test_fewstay_trivial_and_validation():
    empty = ExperimentSpec(
        "FewStayProbe", 1, SYM1, 0.02, InitialStateSpec.iid_poisson(0.0),
        (16,), k_grid=(0.2,), replicas=10, master_seed=1,
    )
    (row,) = run_fewstay_probe(empty).rows
    assert row.estimate == 0.0

    # rho = 1.5 asks for more mass than one-per-site absorbing states allow
    impossible = ExperimentSpec(
        "FewStayProbe", 1, SYM1, 1.0, InitialStateSpec.iid_poisson(0.5),
        (16,), k_grid=(1.5,), replicas=30, master_seed=1,
    )
    (row,) = run_fewstay_probe(impossible).rows
    assert row.estimate == 0.0

    with pytest.raises(InvalidSpec):
        run_fewstay_probe(ExperimentSpec(
            "FewStayProbe", 1, SYM1, 1.0, InitialStateSpec.iid_poisson(0.5),
            (3,), k_grid=(0.2,),
        ))
    with pytest.raises(InvalidSpec):
        run_fewstay_probe(ExperimentSpec(
            "FewStayProbe", 1, DIRECTED, 1.0, InitialStateSpec.iid_poisson(0.5),
            (16,), k_grid=(0.2,),
        ))
