import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from ricci_couple import geometry as geo
from ricci_couple import models, walk
from ricci_couple.comparison import (
    ComparisonPath,
    ConjugatePointWarning,
    NumericError,
    OUParams,
    RadialDriftSpec,
    beta,
    c0_from_c1,
    chi,
    coupling_bound,
    dominator_bm,
    exceedance_fraction,
    jacobi_G,
    non_explosion_test,
    ou_positive_tail,
    ou_positive_tail_mc,
    ou_simulate,
    radial_rho_cosimulate,
)
from ricci_couple.geometry import Point


def test_beta_values():
    assert beta(0.0, 2.0) == 2.0
    assert beta(1.0, 1.0) == pytest.approx(math.e - 1)
    assert beta(-2.0, 0.5) == pytest.approx((1 - math.exp(-1)) / 2)
    assert np.allclose(beta(0.5, np.array([0.0, 1.0])), [0.0, 2 * (math.exp(0.5) - 1)])
    with pytest.raises(ValueError):
        beta(1.0, -0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.0, 4.0))
def test_beta_continuous_across_series_switch(k, t):
    # integral of e^{ks} over [0, t]
    ref = integrate.quad(lambda s: math.exp(k * s), 0.0, t)[0]
    assert beta(k, t) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_chi_and_bound():
    assert chi(0.0) == 0.0
    assert chi(1.959963984540054) == pytest.approx(0.95, abs=1e-12)
    assert chi(1.0) == pytest.approx(stats.norm.cdf(1) - stats.norm.cdf(-1), abs=1e-14)
    assert coupling_bound(1.0, 0.0, 1.0) == pytest.approx(chi(0.5))
    assert coupling_bound(0.0, 1.0, 1.0) == 0.0
    assert coupling_bound(1.0, 0.0, 0.0) == 1.0
    # larger k means faster metric growth, so a weaker bound at fixed horizon
    assert coupling_bound(1.0, 1.0, 1.0) < coupling_bound(1.0, 0.0, 1.0) < coupling_bound(1.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        chi(-1.0)


def test_ou_exact_transition_moments():
    p = OUParams(a=1.0, k=1.2, horizon=(0.0, 1.0))
    path = ou_simulate(p, 0.05, np.random.default_rng(0), n_paths=100_000)
    end = path.values[:, -1]
    mean = math.exp(-0.6)
    var = 4 * (1 - math.exp(-1.2)) / 1.2
    assert end.mean() == pytest.approx(mean, abs=4 * math.sqrt(var / 1e5))
    assert end.var() == pytest.approx(var, rel=0.02)
    assert path.times[-1] == 1.0 and path.values[0, 0] == 1.0


def test_ou_at_k_zero_matches_dominator():
    p = OUParams(a=0.5, k=0.0)
    a = ou_simulate(p, 0.1, np.random.default_rng(1), n_paths=20_000).values[:, -1]
    b = dominator_bm(0.5, (0.0, 1.0), 0.1, np.random.default_rng(2), n_paths=20_000).values[:, -1]
    assert stats.ks_2samp(a, b).pvalue > 1e-3
    assert stats.kstest((b - 0.5) / 2, "norm").pvalue > 1e-3


@pytest.mark.parametrize("a,k", [(1.0, 0.0), (0.6, 1.0), (1.0, -0.8)])
def test_positive_tail_monte_carlo_agrees(a, k):
    p = OUParams(a=a, k=k)
    mc = ou_positive_tail_mc(p, 1.0, 0.01, 100_000, np.random.default_rng(3))
    assert mc == pytest.approx(ou_positive_tail(p, 1.0), abs=0.005)


def test_ou_params_validation():
    with pytest.raises(ValueError):
        OUParams(a=-1.0, k=0.0)
    with pytest.raises(ValueError):
        OUParams(a=1.0, k=0.0, horizon=(1.0, 1.0))
    with pytest.raises(ValueError):
        ou_positive_tail(OUParams(1.0, 0.0), 2.0)


def test_c0_from_c1():
    assert c0_from_c1(1.0, 0.5) == pytest.approx(1 + 0.375 + 0.5 / math.tanh(0.5))
    with pytest.raises(ValueError):
        c0_from_c1(0.0, 0.5)


def test_radial_drift_ingredients():
    spec = RadialDriftSpec(C0=1.5, r0=0.1, b=lambda s: 2.0 * np.ones_like(s))
    # phi(r) = C0 + (1/2) int_0^r b
    assert np.allclose(spec.phi([0.0, 0.5, 2.0]), [1.5, 2.0, 3.5], atol=1e-9)
    assert spec.psi(1.0) == pytest.approx(2 / 0.8)
    assert np.all(RadialDriftSpec(C0=1.0, r0=0.1).phi([0.0, 3.0]) == 1.0)
    with pytest.raises(ValueError):
        RadialDriftSpec(C0=1.0, r0=0.1, b=lambda s: -s).b_values([1.0])
    with pytest.raises(ValueError):
        RadialDriftSpec(C0=0.0, r0=0.1)


def test_radial_rho_first_step_by_hand(euclid2):
    spec = RadialDriftSpec(C0=1.0, r0=0.1)
    path = walk.simulate(euclid2, [0.5, 0.0], 0.1, walk.trial_rng(0, 0))
    rho = radial_rho_cosimulate(path, euclid2, spec)
    assert rho.values[0] == pytest.approx(0.5 + 0.3)
    x0 = path.points.coords[0]
    lam = 2.0 * path.draws[0] @ (x0 / np.linalg.norm(x0))
    r = rho.values[0]
    expected = r + 0.1 * lam + 0.01 * (1.0 + 2 / (r - 0.2))
    assert rho.values[1] == pytest.approx(expected, abs=1e-12)
    assert rho.floor_violations() == 0
    d = np.linalg.norm(path.points.coords, axis=-1)
    assert exceedance_fraction(d, rho) == 0.0


def test_radial_rho_needs_frames(euclid2):
    rngs = [walk.trial_rng(0, i) for i in range(3)]
    batch = walk.run_walks(euclid2, [0.5, 0.0], 0.1, rngs)
    rho = radial_rho_cosimulate(batch, euclid2, RadialDriftSpec(C0=1.0, r0=0.1))
    assert rho.values.shape == (3, batch.grid.n_steps + 1)


def test_floor_violations_and_exceedance():
    rho = ComparisonPath(times=np.arange(3.0), values=np.array([0.5, 0.15, 0.3]), kind="radial_rho", r0=0.1)
    assert rho.floor_violations() == 1
    assert exceedance_fraction(np.array([0.2, 0.3, 0.5]), rho) == pytest.approx(2 / 3)
    assert ComparisonPath(np.arange(2.0), np.zeros(2), "ou").floor_violations() == 0


def _model(kind, dim, **params):
    return models.build(models.ModelSpec(kind=kind, dim=dim, horizon=(0.0, 0.2), parameters=params))


@pytest.mark.parametrize("kind,params,ref", [
    ("euclidean", {}, lambda u: u),
    ("sphere_static", {"c0": 1.0}, np.sin),
    ("hyperbolic_scaled", {"c0": 1.0}, np.sinh),
])
def test_jacobi_constant_curvature(kind, params, ref):
    man = _model(kind, 3, **params)
    p, q = Point([0.0, 0.0, 0.0]), Point([0.4, 0.2, 0.0])
    g = geo.minimal_geodesic(man, 0.0, p, q)
    tab = jacobi_G(man, 0.0, g, n_steps=200)
    assert tab.conjugate_at is None
    assert np.allclose(tab.G, ref(tab.u), atol=1e-9)


def test_jacobi_warns_past_conjugate_point():
    man = _model("sphere_static", 2, c0=1.0)
    p = Point([0.0, 0.0])
    v = geo.TangentVector(p, geo.orthonormal_frame(man, 0.0, p)[:, 0])
    end = geo.exp_map(man, 0.0, p, 3.5 * v.components)
    g = geo.Geodesic(start=p, velocity=v, t=0.0, length=3.5, end=end, end_velocity=v)
    with pytest.warns(ConjugatePointWarning):
        tab = jacobi_G(man, 0.0, g, n_steps=350)
    assert tab.conjugate_at == pytest.approx(math.pi, abs=0.02)


def test_non_explosion_flat_is_exact():
    # B = 0: u = y - 1 and I(Y) = (Y - 1)^2 / 2
    res = non_explosion_test(None, 0.0)
    assert np.allclose(res.partials, [(y - 1) ** 2 / 2 for y in res.ladder], rtol=1e-7)
    assert res.verdict == "non_explosive" and res.stable
    assert res.slopes[-1] == pytest.approx(2.0, abs=1e-4)


def test_non_explosion_constant_B():
    # B = 1: I(Y) = (Y - 1) - (1 - e^{1-Y})
    res = non_explosion_test(None, 1.0)
    assert res.partials[0] == pytest.approx(9 - (1 - math.exp(-9)), rel=1e-8)
    assert res.verdict == "non_explosive"


def test_non_explosion_against_double_quadrature():
    b = lambda s: 2 * s  # B(y) = 1 + y^2
    F = lambda y: y + y**3 / 3
    ref = integrate.dblquad(lambda z, y: math.exp(F(z) - F(y)), 1.0, 10.0, 1.0, lambda y: y)[0]
    res = non_explosion_test(b, 1.0, ladder=(2.0, 5.0, 10.0))
    assert res.partials[-1] == pytest.approx(ref, rel=1e-6)


def test_non_explosion_explosive_case():
    res = non_explosion_test(lambda s: 3 * s**2, 1.0)  # B grows like y^3: I converges
    assert res.verdict == "explosive" and res.stable
    assert res.increments[-1] < 1e-6


def test_non_explosion_radial_spec_and_validation():
    spec = RadialDriftSpec(C0=1.0, r0=0.1, b=lambda s: np.zeros_like(s))
    assert non_explosion_test(spec, 0.0).verdict == "non_explosive"
    with pytest.raises(ValueError):
        non_explosion_test(None, 0.0, ladder=(10.0, 5.0, 100.0))
    with pytest.raises(ValueError):
        non_explosion_test(None, 0.0, ladder=(10.0, 100.0))


def test_non_explosion_overflow_is_a_numeric_error():
    with pytest.raises(NumericError):
        non_explosion_test(lambda s: np.exp(np.minimum(s, 700.0)) * 1e300, 0.0, ladder=(10.0, 100.0, 1000.0))
