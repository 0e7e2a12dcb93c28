import math

import numpy as np
import pytest
from pydantic import ValidationError

from ricci_couple import geometry as geo
from ricci_couple.harness import (
    ExperimentConfig,
    ObservableSpec,
    SimulationError,
    probe_pair,
    run_contraction_experiment,
    run_gradient_experiment,
    run_invariance_experiment,
    run_marginal_experiment,
    run_tail_experiment,
    wilson_interval,
)

SPHERE = {"kind": "sphere_backward_ricci", "dim": 2, "parameters": {"c0": 1.0}}
FLAT = {"kind": "euclidean", "dim": 2}


def cfg(**kw):
    base = dict(model=SPHERE, alphas=[0.2], trials=100, seed=5, report_times=[0.5, 1.0], separation=1.0,
                chunk_size=40, condition_samples=4)
    base.update(kw)
    return ExperimentConfig(**base)


def test_wilson_interval():
    lo, hi = wilson_interval(50, 100)
    assert (round(lo, 4), round(hi, 4)) == (0.4038, 0.5962)
    assert wilson_interval(0, 10)[0] == 0.0 and wilson_interval(10, 10)[1] == 1.0
    with pytest.raises(ValueError):
        wilson_interval(3, 2)


@pytest.mark.parametrize("bad", [
    dict(trials=99),
    dict(alphas=[0.1, 0.2]),
    dict(alphas=[0.1, -0.05]),
    dict(report_times=[1.5]),
    dict(x1=[0.0, 0.0], separation=None),
    dict(x1=[0.0, 0.0], x2=[1.0, 0.0]),
    dict(x1=[0.0], x2=[1.0], separation=None),
    dict(probe_spacings=[0.1, 0.0]),
    dict(colour="red"),
])
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        cfg(**bad)


def test_observables():
    pts = np.array([[0.5, -0.2, 0.1], [-0.3, 0.4, -0.9], [0.0, 1.0, 0.0]])
    assert ObservableSpec(name="sign").osc == 2.0
    assert np.array_equal(ObservableSpec(name="sign")(pts), [1.0, -1.0, 0.0])
    assert np.array_equal(ObservableSpec(name="hemisphere", axis=2)(pts), [1.0, 0.0, 0.0])
    assert np.array_equal(ObservableSpec(name="constant", value=3.0)(pts), [3.0, 3.0, 3.0])
    assert ObservableSpec(name="constant").osc == 0.0


def test_probe_pair_is_centred(sphere2):
    x, y = probe_pair(sphere2, sphere2.base_point, 0.3)
    c = sphere2.base_point
    assert float(geo.distance(sphere2, 0.0, x, y)) == pytest.approx(0.3, abs=1e-12)
    assert float(geo.distance(sphere2, 0.0, c, x)) == pytest.approx(0.15, abs=1e-12)


def test_tail_report_independent_of_workers_and_chunks():
    a = run_tail_experiment(cfg(), workers=1)
    b = run_tail_experiment(cfg(), workers=2)
    c = run_tail_experiment(cfg(chunk_size=100), workers=1)
    assert a.rows == b.rows == c.rows
    assert a.a == pytest.approx(1.0)
    assert [r.T for r in a.rows] == [0.5, 1.0]
    assert a.rows[0].tail >= a.rows[1].tail
    assert a.diagnostics[0]["delta_couple"] == pytest.approx(0.2)
    assert a.warning is None


def test_tail_zero_for_identical_start():
    rep = run_tail_experiment(cfg(separation=0.0))
    assert rep.a == 0.0
    assert all(r.tail == 0.0 and r.bound == 0.0 and r.passed for r in rep.rows)


def test_tail_warns_when_condition_fails():
    static = {"kind": "sphere_static", "dim": 2, "parameters": {"c0": 1.0}}
    rep = run_tail_experiment(cfg(model=static, k=2.0, report_times=[1.0]))
    assert rep.warning is not None and "violated" in rep.warning


def test_gradient_constant_observable_is_zero():
    rep = run_gradient_experiment(cfg(observable={"name": "constant", "value": 2.0}, probe_spacings=[0.2, 0.1]))
    assert rep.osc == 0.0
    assert all(r.quotient == 0.0 and r.bound == 0.0 and r.passed for r in rep.rows)
    assert all(r.direct == 0.0 and r.agree for r in rep.rows)


def test_gradient_requires_observable():
    with pytest.raises(ValueError):
        run_gradient_experiment(cfg())


def test_gradient_rows_and_bound():
    rep = run_gradient_experiment(cfg(observable={"name": "sign"}, probe_spacings=[0.4, 0.2], trials=200),
                                  direct=False)
    assert len(rep.rows) == 2 and rep.trend is not None
    expected = 2.0 / math.sqrt(2 * math.pi * 1.0)
    assert all(r.bound == pytest.approx(expected) for r in rep.rows)
    assert all(math.isnan(r.direct) for r in rep.rows)


def test_flat_contraction_is_exactly_zero():
    rep = run_contraction_experiment(cfg(model=FLAT, alphas=[0.2, 0.1]))
    assert rep.step_max == [0.0, 0.0] and rep.passed
    assert all(math.isnan(r) for r in rep.ratios)


def test_marginals_match_reference_walks():
    rep = run_marginal_experiment(cfg(trials=400, chunk_size=400), reference_factor=2)
    assert rep.reference_trials == 800
    # two-sample KS at n = 400 vs 800: the 1% critical value is about 0.10
    assert rep.worst < 0.1


def test_invariance_flat_gaussian():
    rep = run_invariance_experiment(cfg(model=FLAT, alphas=[0.2, 0.1], trials=2000, chunk_size=2000,
                                        separation=None))
    assert all(w < 0.05 for w in rep.worst)
    with pytest.raises(ValueError):
        run_invariance_experiment(cfg())


def test_failures_name_the_trial_range():
    hyper = {"kind": "hyperbolic_scaled", "dim": 2, "horizon": [0.0, 0.9], "parameters": {"c0": 1.0}}
    bad = cfg(model=hyper, alphas=[0.3], x1=[0.999999, 0.0], x2=[0.999999, 0.0001], separation=None,
              report_times=[0.9], chunk_size=50)
    with pytest.raises(SimulationError) as info:
        run_tail_experiment(bad)
    assert info.value.first_trial == 0 and info.value.last_trial == 49
