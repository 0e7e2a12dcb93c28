import math

import numpy as np
import pytest
from pydantic import ValidationError

from ricci_couple import geometry as geo
from ricci_couple import models
from ricci_couple.geometry import Point
from ricci_couple.models import InvalidSpec, ModelSpec, build, verify_condition


def spec(kind, dim=2, horizon=(0.0, 1.0), **params):
    return ModelSpec(kind=kind, dim=dim, horizon=horizon, parameters=params)


@pytest.mark.parametrize("bad,field", [
    (dict(kind="sphere_backward_ricci", dim=2), "parameters"),
    (dict(kind="sphere_static", dim=1, parameters={"c0": 1.0}), "dim"),
    (dict(kind="euclidean", dim=2, parameters={"c0": 1.0}), "parameters"),
    (dict(kind="sphere_static", dim=2, parameters={"c0": -1.0}), "parameters.c0"),
    (dict(kind="chart_generic", dim=2), "metric"),
    (dict(kind="euclidean", dim=2, base_point=[0.0]), "base_point"),
])
def test_invalid_specs(bad, field):
    with pytest.raises(InvalidSpec) as info:
        build(ModelSpec(**bad))
    assert info.value.field == field


def test_spec_rejects_unknown_keys_and_bad_horizon():
    with pytest.raises(ValidationError):
        ModelSpec(kind="euclidean", dim=2, colour="red")
    with pytest.raises(ValidationError):
        ModelSpec(kind="euclidean", dim=2, horizon=(1.0, 0.5))


def test_hyperbolic_scale_must_stay_positive():
    # c(t) = c0 - (m - 1) t reaches zero inside the horizon
    with pytest.raises(InvalidSpec):
        build(spec("hyperbolic_scaled", horizon=(0.0, 2.0), c0=1.0))
    build(spec("hyperbolic_scaled", horizon=(0.0, 0.5), c0=1.0))


def test_beta_time_limit():
    assert float(models.beta_time(0.0, 2.0)) == 2.0
    assert float(models.beta_time(1e-9, 1.0)) == pytest.approx(1.0, abs=1e-8)
    assert float(models.beta_time(1.0, 1.0)) == pytest.approx(math.e - 1)


@pytest.mark.parametrize("kind,params,k", [
    ("euclidean", {}, 0.0),
    ("sphere_backward_ricci", {"c0": 1.0}, 0.0),
    ("sphere_backward_ricci", {"c0": 2.0, "k": 0.5}, 0.5),
    ("hyperbolic_scaled", {"c0": 3.0, "k": 0.5}, 0.5),
    ("euclidean", {"k": 1.0}, 1.0),
])
def test_equality_models_have_zero_violation(kind, params, k):
    man = build(ModelSpec(kind=kind, dim=3, horizon=(0.0, 0.5), parameters=params))
    rep = verify_condition(man, k, 16, seed=3)
    assert abs(rep.max_violation) < 1e-6


def test_scaled_metric_solves_flow_equation():
    # dg/dt = Ric - k g for the time-changed scaling
    man = build(spec("sphere_backward_ricci", dim=3, c0=1.5, k=0.7))
    p = Point([0.2, -0.1, 0.4])
    for t in (0.1, 0.6):
        s = geo.metric_at(man, t, p)
        ric = geo.ricci_tensor(man, t, p)
        assert np.allclose(s.dgdt, ric - 0.7 * s.g, atol=1e-12)


def test_static_sphere_sign():
    man = build(spec("sphere_static", c0=1.0))
    # positive curvature with a frozen metric: dg/dt - Ric = -Ric
    assert verify_condition(man, 0.0, 16, seed=0).max_violation == pytest.approx(-1.0, abs=1e-9)
    bad = verify_condition(man, 2.0, 16, seed=0)
    assert bad.max_violation == pytest.approx(1.0, abs=1e-9)
    assert not bad.holds() and len(bad.witnesses) == 3
    assert bad.witnesses[0]["value"] == pytest.approx(1.0, abs=1e-9)


def test_violation_shifts_by_k(sphere2):
    a = verify_condition(sphere2, 0.0, 12, seed=9).max_violation
    b = verify_condition(sphere2, 0.3, 12, seed=9).max_violation
    assert b - a == pytest.approx(0.3, abs=1e-9)


def test_radial_drift_enters_condition():
    # Z = -lam x gives 2 <nabla_v Z, v> = -2 lam
    man = build(ModelSpec(kind="euclidean", dim=2, drift={"name": "radial", "strength": 0.25}))
    rep = verify_condition(man, 0.0, 8, seed=1)
    assert rep.max_violation == pytest.approx(-0.5, abs=1e-8)


def test_numeric_and_closed_condition_agree():
    man = build(spec("hyperbolic_scaled", horizon=(0.0, 0.3), c0=2.0))
    a = verify_condition(man, 0.0, 6, seed=2, method="closed").max_violation
    b = verify_condition(man, 0.0, 6, seed=2, method="numeric").max_violation
    assert a == pytest.approx(b, abs=1e-5)


def test_sphere_charts_agree():
    man = build(spec("sphere_static", c0=1.0))
    form = man.closed
    p = Point([0.4, -0.2])
    q = form.chart_map(p, 1)
    assert q.chart == 1
    assert np.allclose(form.to_ambient(p), form.to_ambient(q))
    assert float(geo.distance(man, 0.0, p, q)) == pytest.approx(0.0, abs=1e-12)


def test_walk_across_the_pole_switches_chart():
    man = build(spec("sphere_static", c0=1.0))
    p = Point([1.8, 0.0])
    v = geo.orthonormal_frame(man, 0.0, p)[:, 0] * 0.5
    q = geo.exp_map(man, 0.0, p, v)
    assert q.chart == 1  # chart-0 radius would exceed the switch threshold
    assert float(geo.distance(man, 0.0, p, q)) == pytest.approx(0.5, abs=1e-12)


def test_antipodal_tie_break_is_deterministic():
    man = build(spec("sphere_static", c0=1.0))
    p, q = Point([0.0, 0.0]), Point([0.0, 0.0], chart=1)  # south and north pole
    v1 = man.closed.log(0.0, p, q)
    v2 = man.closed.log(0.0, p, q)
    assert np.array_equal(v1, v2)
    assert v1[0] > 0 and abs(v1[1]) < 1e-12
    assert float(geo.norm(man, 0.0, p, v1)) == pytest.approx(math.pi)
    assert bool(man.closed.near_cut(0.0, p, q))


def test_hyperbolic_clamp_raises():
    man = build(spec("hyperbolic_scaled", horizon=(0.0, 0.2), c0=1.0))
    p = Point([0.9, 0.0])
    v = geo.orthonormal_frame(man, 0.0, p)[:, 0] * 30.0
    with pytest.raises(geo.DomainError):
        geo.exp_map(man, 0.0, p, v)


def test_embed():
    man = build(spec("sphere_static", c0=1.0))
    X = models.embed(man, Point([0.0, 0.0]))
    assert np.allclose(X, [0.0, 0.0, -1.0])
