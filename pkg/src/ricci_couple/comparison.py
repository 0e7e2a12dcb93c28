"""One-dimensional comparison machinery.

* the Ornstein-Uhlenbeck dominator ``dU = -(k/2) U dt + 2 dB`` and its
  positivity probability ``chi(a / 2 sqrt(beta))``;
* the radial comparison process driven by the walk's own noise;
* the scalar Jacobi equation ``G'' = -(Ric/(m-1)) G``;
* a numeric non-explosion test for the 1-D radial diffusion.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad, solve_ivp
from scipy.special import erf

from . import geometry as geo
from .geometry import Point, TimeDependentManifold
from .walk import WalkPath


class NumericError(RuntimeError):
    pass


class ConjugatePointWarning(UserWarning):
    pass


# ------------------------------------------------------------- formulas


def beta(k: float, t):
    """(e^{kt} - 1)/k, and t at k = 0 (series near k t = 0)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("beta needs t >= 0")
    kt = k * t_arr
    small = np.abs(kt) < 1e-6
    with np.errstate(over="ignore"):
        exact = np.expm1(kt) / np.where(k == 0, 1.0, k)
    series = t_arr * (1 + kt / 2 + kt * kt / 6)
    out = np.where(small, series, exact)
    return float(out) if out.ndim == 0 else out


def chi(a):
    """Standard normal mass of [-a, a]."""
    a_arr = np.asarray(a, dtype=float)
    if np.any(a_arr < 0):
        raise ValueError("chi needs a >= 0")
    out = erf(a_arr / math.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


def coupling_bound(a: float, k: float, horizon: float) -> float:
    """chi(a / (2 sqrt(beta(k, horizon)))); the horizon -> 0 limit is 1 for a > 0."""
    if a < 0 or horizon < 0:
        raise ValueError("need a >= 0 and horizon >= 0")
    if a == 0:
        return 0.0
    b = beta(k, horizon)
    if b <= 0:
        return 1.0
    return chi(a / (2.0 * math.sqrt(b)))


# ------------------------------------------------------------ OU dominator


@dataclass(frozen=True)
class OUParams:
    a: float
    k: float
    horizon: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("a must be >= 0")
        if not self.horizon[0] < self.horizon[1]:
            raise ValueError("horizon must satisfy T1 < T2")


@dataclass(frozen=True, eq=False)
class ComparisonPath:
    """Aligned ``times`` and ``values``; values may carry a leading batch axis."""

    times: np.ndarray
    values: np.ndarray
    kind: Literal["ou", "radial_rho", "dominator_bm"]
    r0: Optional[float] = None
    flags: Optional[np.ndarray] = None  # near-cut-locus steps (radial_rho)

    def floor_violations(self) -> int:
        """Count of entries with rho <= 2 r0 (radial_rho only)."""
        if self.kind != "radial_rho" or self.r0 is None:
            return 0
        return int(np.sum(self.values <= 2 * self.r0))


def _ou_coefficients(k: float, dt: float) -> tuple[float, float]:
    decay = math.exp(-k * dt / 2)
    var = 4 * dt if abs(k * dt) < 1e-12 else 4 * (-math.expm1(-k * dt)) / k
    return decay, var


def ou_simulate(params: OUParams, dt: float, rng: np.random.Generator, n_paths: Optional[int] = None) -> ComparisonPath:
    """Exact-transition samples of U on the grid T1, T1+dt, ..., T2."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    t1, t2 = params.horizon
    n = int(math.ceil((t2 - t1) / dt - 1e-9))
    times = np.minimum(t1 + dt * np.arange(n + 1), t2)
    shape = () if n_paths is None else (n_paths,)
    vals = np.empty(shape + (n + 1,))
    u = np.full(shape, float(params.a))
    vals[..., 0] = u
    for i in range(n):
        decay, var = _ou_coefficients(params.k, float(times[i + 1] - times[i]))
        u = decay * u + math.sqrt(var) * rng.standard_normal(shape)
        vals[..., i + 1] = u
    return ComparisonPath(times=times, values=vals, kind="ou")


def dominator_bm(a: float, horizon: tuple[float, float], dt: float, rng: np.random.Generator,
                 n_paths: Optional[int] = None) -> ComparisonPath:
    """a + 2 B(t - T1) on a grid."""
    t1, t2 = horizon
    n = int(math.ceil((t2 - t1) / dt - 1e-9))
    times = np.minimum(t1 + dt * np.arange(n + 1), t2)
    shape = () if n_paths is None else (n_paths,)
    steps = rng.standard_normal(shape + (n,)) * np.sqrt(np.diff(times))
    vals = a + 2 * np.concatenate([np.zeros(shape + (1,)), np.cumsum(steps, axis=-1)], axis=-1)
    return ComparisonPath(times=times, values=vals, kind="dominator_bm")


def ou_positive_tail(params: OUParams, T: float) -> float:
    """P[inf_{T1 <= t <= T} U(t) > 0]."""
    t1, t2 = params.horizon
    if not t1 - 1e-12 <= T <= t2 + 1e-12:
        raise ValueError(f"T={T} outside the horizon")
    return coupling_bound(params.a, params.k, max(T - t1, 0.0))


def ou_positive_tail_mc(params: OUParams, T: float, dt: float, n_paths: int, rng: np.random.Generator) -> float:
    """Monte Carlo version with a Brownian-bridge survival factor per step.

    Between grid values u0, u1 > 0 the path stays positive with probability
    1 - exp(-2 u0 u1 / (sigma^2 dt)), sigma = 2.
    """
    t1 = params.horizon[0]
    n = int(math.ceil((T - t1) / dt - 1e-9))
    times = np.minimum(t1 + dt * np.arange(n + 1), T)
    u = np.full(n_paths, float(params.a))
    survive = np.where(u > 0, 1.0, 0.0)
    for i in range(n):
        h = float(times[i + 1] - times[i])
        decay, var = _ou_coefficients(params.k, h)
        nxt = decay * u + math.sqrt(var) * rng.standard_normal(n_paths)
        both = (u > 0) & (nxt > 0)
        survive *= np.where(both, -np.expm1(-np.maximum(u * nxt, 0.0) / (2 * h)), 0.0)
        u = nxt
    return float(np.mean(survive))


# ------------------------------------------------------- radial comparison


def c0_from_c1(c1: float, r0: float) -> float:
    """C0 = C1 (1 + 3 r0 / 4 + coth(C1 r0) / 2)."""
    if c1 <= 0 or r0 <= 0:
        raise ValueError("C1 and r0 must be positive")
    return c1 * (1 + 0.75 * r0 + 0.5 / math.tanh(c1 * r0))


@dataclass(frozen=True, eq=False)
class RadialDriftSpec:
    """Radial drift ingredients; ``b=None`` means b = 0."""

    C0: float
    r0: float
    b: Optional[Callable[[np.ndarray], np.ndarray]] = None
    _table: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.C0 > 0 or not self.r0 > 0:
            raise ValueError("C0 and r0 must be positive")

    def b_values(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.b is None:
            return np.zeros_like(s)
        vals = np.broadcast_to(np.asarray(self.b(s), dtype=float), s.shape)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("b must be finite and nonnegative")
        return vals

    def _half_integral(self, r: np.ndarray) -> np.ndarray:
        if self.b is None:
            return np.zeros_like(r)
        top = float(np.max(r, initial=1.0))
        tab = self._table.get("grid")
        if tab is None or tab[0][-1] < top:
            grid = np.linspace(0.0, 2 * top, 4097)
            tab = (grid, cumulative_trapezoid(self.b_values(grid), grid, initial=0.0))
            self._table["grid"] = tab
        return 0.5 * np.interp(r, tab[0], tab[1])

    def phi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.C0 + self._half_integral(np.maximum(r, 0.0))

    def psi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return 2.0 / (r - 2 * self.r0)


def _outward_unit(man: TimeDependentManifold, t: float, x: Point, o: Point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit g(t) velocity at x of the minimal geodesic from o, plus distance and near-cut flags."""
    if man.has_closed("log"):
        v = -man.closed.log(t, x, o)
        near = man.closed.near_cut(t, x, o) if man.has_closed("near_cut") else np.zeros(x.shape, bool)
    else:
        g = geo.minimal_geodesic(man, t, x, o)
        v = -g.velocity.components * np.asarray(g.length)[..., None]
        near = np.broadcast_to(np.asarray(g.near_cut, bool), x.shape)
    d = geo.norm(man, t, x, v)
    unit = v / np.where(d > 0, d, 1.0)[..., None]
    return unit, d, near


def radial_rho_cosimulate(walk: WalkPath, man: TimeDependentManifold, spec: RadialDriftSpec) -> ComparisonPath:
    """rho driven by the walk's own radial noise.

    rho_0 = d(o, x0) + 3 r0 and each step adds
    frac * (alpha lambda + alpha^2 (phi(rho) + psi(rho))), with lambda the
    component of the scaled noise along the outward direction from o (inside
    B_{r0}(o) the first frame component is used instead).
    """
    if walk.frames.shape[-3] != walk.grid.n_steps:
        raise ValueError("walk has no stored frames; simulate with record=True")
    grid, alpha, m = walk.grid, walk.alpha, man.dim
    o = man.base_point
    c = math.sqrt(m + 2)
    pts = walk.points
    batch = pts.shape[:-1]
    ob = Point(np.broadcast_to(o.coords, batch + (m,)), np.broadcast_to(o.chart, batch))
    rho = np.empty(batch + (grid.n_steps + 1,))
    flags = np.zeros(batch + (grid.n_steps,), bool)
    x0 = Point(pts.coords[..., 0, :], pts.chart[..., 0])
    rho[..., 0] = geo.distance(man, float(grid.times[0]), ob, x0) + 3 * spec.r0
    for n in range(grid.n_steps):
        t = float(grid.times[n])
        x = Point(pts.coords[..., n, :], pts.chart[..., n])
        xi = walk.draws[..., n, :]
        noise = c * np.einsum("...ij,...j->...i", walk.frames[..., n, :, :], xi)
        unit, d, near = _outward_unit(man, t, x, ob)
        lam = np.where(d > spec.r0, geo.inner(man, t, x, noise, unit), c * xi[..., 0])
        r = rho[..., n]
        drift = spec.phi(r) + spec.psi(r)
        rho[..., n + 1] = r + grid.fraction(n) * (alpha * lam + alpha * alpha * drift)
        flags[..., n] = near
    return ComparisonPath(times=grid.times.copy(), values=rho, kind="radial_rho", r0=spec.r0, flags=flags)


def exceedance_fraction(distances: np.ndarray, rho: ComparisonPath, margin: float = 0.1) -> float:
    """Fraction of (trial, step) pairs with d > rho + margin."""
    return float(np.mean(distances > rho.values + margin))


# ------------------------------------------------------------------ Jacobi


@dataclass(frozen=True)
class JacobiTable:
    u: np.ndarray
    G: np.ndarray
    dG: np.ndarray
    conjugate_at: Optional[float] = None


def jacobi_G(man: TimeDependentManifold, t: float, g: geo.Geodesic, n_steps: int = 400) -> JacobiTable:
    """RK4 for G'' = -(Ric(v, v)/(m-1)) G, G(0) = 0, G'(0) = 1 along unit-speed ``g``."""
    L = float(np.asarray(g.length))
    u = np.linspace(0.0, L, n_steps + 1)
    if man.dim == 1 or L == 0:
        return JacobiTable(u=u, G=u.copy(), dG=np.ones_like(u))
    half = np.linspace(0.0, L, 2 * n_steps + 1)
    start = Point(np.broadcast_to(g.start.coords, half.shape + (man.dim,)), np.broadcast_to(g.start.chart, half.shape))
    v0 = np.broadcast_to(g.velocity.components, half.shape + (man.dim,)).copy()
    pts = geo.exp_map(man, t, start, v0 * half[:, None])
    piece = geo.Geodesic(start=start, velocity=geo.TangentVector(start, v0), t=t, length=half, end=pts,
                         end_velocity=geo.TangentVector(pts, v0))
    vel = geo.parallel_transport(man, t, piece, v0).components
    q = geo.ricci(man, t, pts, vel, vel) / (man.dim - 1)
    h = L / n_steps
    G = np.zeros(n_steps + 1)
    dG = np.zeros(n_steps + 1)
    dG[0] = 1.0
    conj = None
    for i in range(n_steps):
        q0, qm, q1 = q[2 * i], q[2 * i + 1], q[2 * i + 2]
        y, v = G[i], dG[i]
        k1y, k1v = v, -q0 * y
        k2y, k2v = v + h / 2 * k1v, -qm * (y + h / 2 * k1y)
        k3y, k3v = v + h / 2 * k2v, -qm * (y + h / 2 * k2y)
        k4y, k4v = v + h * k3v, -q1 * (y + h * k3y)
        G[i + 1] = y + h / 6 * (k1y + 2 * k2y + 2 * k3y + k4y)
        dG[i + 1] = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if conj is None and G[i + 1] <= 0:
            conj = float(u[i + 1])
    if conj is not None:
        warnings.warn(f"G vanishes at u={conj:.6g} < length {L:.6g}", ConjugatePointWarning, stacklevel=2)
    return JacobiTable(u=u, G=G, dG=dG, conjugate_at=conj)


# --------------------------------------------------------- non-explosion

DEFAULT_LADDER = (10.0, 100.0, 1e3, 1e4, 1e5, 1e6)
SLOPE_THRESHOLD = 0.5
CONVERGENCE_TOL = 1e-6


@dataclass(frozen=True)
class NonExplosionResult:
    verdict: Literal["non_explosive", "explosive", "inconclusive"]
    ladder: tuple
    partials: tuple  # I(Y) for each rung
    slopes: tuple  # log-log slope between consecutive rungs
    increments: tuple  # relative increment between consecutive rungs
    verdicts: tuple  # verdict from each consecutive pair
    stable: bool


def _classify(slope: float, increment: float, slope_threshold: float, tol: float) -> str:
    if slope >= slope_threshold:
        return "non_explosive"
    if increment < tol:
        return "explosive"
    return "inconclusive"


def non_explosion_test(spec, C: float, ladder: Sequence[float] = DEFAULT_LADDER,
                       slope_threshold: float = SLOPE_THRESHOLD, tol: float = CONVERGENCE_TOL) -> NonExplosionResult:
    """Partial values of int_1^Y exp(-int_1^y B) int_1^y exp(int_1^z B) dz dy, B(y) = C + int_0^y b.

    The inner factor u(y) solves u' = 1 - B u, u(1) = 0, so the double
    integral is I with I' = u; both are integrated with an implicit solver
    because u relaxes on the fast scale 1/B.
    """
    ladder = tuple(float(y) for y in ladder)
    if len(ladder) < 3 or any(b <= a for a, b in zip(ladder, ladder[1:])) or ladder[0] <= 1:
        raise ValueError("ladder must hold >= 3 strictly increasing rungs above 1")
    if isinstance(spec, RadialDriftSpec):
        bfun = spec.b_values
    elif spec is None:
        bfun = lambda s: np.zeros_like(np.asarray(s, float))
    else:
        bfun = lambda s: np.asarray(spec(np.asarray(s, float)), float)

    b0, err = quad(lambda s: float(bfun(s)), 0.0, 1.0)
    B1 = C + b0

    def rhs(y, z):
        u, _, B = z
        return [1.0 - B * u, u, float(bfun(y))]

    def jac(y, z):
        u, _, B = z
        return [[-B, 0.0, -u], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]

    try:
        with np.errstate(all="ignore"):
            sol = solve_ivp(rhs, (1.0, ladder[-1]), [0.0, 0.0, B1], method="Radau", jac=jac, t_eval=ladder,
                            rtol=1e-10, atol=1e-14)
    except (ValueError, OverflowError, FloatingPointError) as exc:
        raise NumericError(f"integration failed: {exc}") from exc
    if not sol.success or sol.y.shape[1] != len(ladder) or not np.all(np.isfinite(sol.y)):
        raise NumericError(f"integration failed: {sol.message}")
    partials = tuple(float(v) for v in sol.y[1])
    slopes, incs, verdicts = [], [], []
    for (y0, i0), (y1, i1) in zip(zip(ladder, partials), zip(ladder[1:], partials[1:])):
        slope = math.log(i1 / i0) / math.log(y1 / y0) if i0 > 0 and i1 > 0 else 0.0
        inc = abs(i1 - i0) / abs(i1) if i1 != 0 else 0.0
        slopes.append(slope)
        incs.append(inc)
        verdicts.append(_classify(slope, inc, slope_threshold, tol))
    return NonExplosionResult(
        verdict=verdicts[-1], ladder=ladder, partials=partials, slopes=tuple(slopes), increments=tuple(incs),
        verdicts=tuple(verdicts), stable=verdicts[-1] == verdicts[-2],
    )
