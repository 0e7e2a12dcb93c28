"""Time-dependent Riemannian manifolds in chart coordinates.

Everything here works on batches: a :class:`Point` may hold coordinates of
shape ``(..., m)`` with a matching integer chart label of shape ``(...)``.
Time ``t`` is always a scalar.

Each operation has a numeric path (finite differences of the metric, RK4
on the geodesic / transport ODEs, shooting for the two-point problem) and
dispatches to closed forms when the manifold carries them.  ``method``
selects the path: ``"auto"`` (closed form when available), ``"numeric"``
or ``"closed"``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np


class GeometryError(Exception):
    """Model misconfiguration: degenerate or indefinite metric."""


class DomainError(GeometryError):
    """A point or geodesic left the chart domain."""


class GeodesicSolveError(GeometryError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class NumericsConfig:
    """Step sizes and tolerances for the numeric geometry path."""

    dt_fd: Optional[float] = None  # None -> 1e-5 * (T2 - T1)
    dx_fd: float = 1e-3  # spatial step of the 4th-order stencil
    rk4_step: float = 1e-2
    transport_step: float = 1e-3
    shoot_tol: float = 1e-11
    shoot_max_iter: int = 60
    point_tol: float = 1e-9
    pd_floor: float = 1e-12


@dataclass(frozen=True)
class Point:
    coords: np.ndarray
    chart: Any = 0

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim == 0:
            coords = coords.reshape(1)
        chart = np.broadcast_to(np.asarray(self.chart, dtype=np.int64), coords.shape[:-1]).copy()
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "chart", chart)

    @property
    def dim(self) -> int:
        return self.coords.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.coords.shape[:-1]

    def __getitem__(self, idx) -> "Point":
        return Point(self.coords[idx], self.chart[idx])

    def where(self, mask, other: "Point") -> "Point":
        """Elementwise select: ``self`` where ``mask`` else ``other``."""
        mask = np.asarray(mask, dtype=bool)
        return Point(np.where(mask[..., None], self.coords, other.coords),
                     np.where(mask, self.chart, other.chart))


@dataclass(frozen=True)
class TangentVector:
    base: Point
    components: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "components", np.asarray(self.components, dtype=float))


@dataclass(frozen=True)
class MetricSample:
    g: np.ndarray
    dgdt: np.ndarray


@dataclass(frozen=True)
class Geodesic:
    """Unit-speed g(t)-geodesic from ``start`` of the given ``length``."""

    start: Point
    velocity: TangentVector
    t: float
    length: np.ndarray
    end: Point
    end_velocity: TangentVector
    samples: tuple = ()
    near_cut: Any = False

    def point_at(self, man: "TimeDependentManifold", u, method: str = "auto") -> Point:
        u = np.asarray(u, dtype=float)
        return exp_map(man, self.t, self.start, self.velocity.components * u[..., None], method=method)

    def reversed(self) -> "Geodesic":
        return Geodesic(
            start=self.end,
            velocity=TangentVector(self.end, -self.end_velocity.components),
            t=self.t,
            length=self.length,
            end=self.start,
            end_velocity=TangentVector(self.start, -self.velocity.components),
            near_cut=self.near_cut,
        )


def _always_inside(p: Point) -> np.ndarray:
    return np.ones(p.shape, dtype=bool)


@dataclass(frozen=True, eq=False)
class TimeDependentManifold:
    """A family (M, g(t)), t in [T1, T2], described in chart coordinates.

    ``metric_fn(t, p)`` returns the metric matrices for a batch of points.
    ``closed`` is an optional object with closed-form overrides (``exp``,
    ``log``, ``transport``, ``distance``, ``christoffel``, ``ricci``,
    ``frame``, ``near_cut``, ``chart_map``); any subset may be present.
    """

    dim: int
    horizon: tuple
    metric_fn: Callable[[float, Point], np.ndarray]
    dgdt_fn: Optional[Callable[[float, Point], np.ndarray]] = None
    drift_fn: Optional[Callable[[float, Point], np.ndarray]] = None
    base_point: Optional[Point] = None
    closed: Any = None
    in_domain: Callable[[Point], np.ndarray] = _always_inside
    curvature_lower_bound: Optional[float] = None
    injectivity_hint: float = math.inf
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    name: str = "manifold"
    # model-specific extras: sampler, embedding, charts, observables
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        t1, t2 = self.horizon
        if not t1 < t2:
            raise GeometryError(f"horizon must satisfy T1 < T2, got {self.horizon}")
        if self.dim < 1:
            raise GeometryError("dimension must be >= 1")

    @property
    def T1(self) -> float:
        return float(self.horizon[0])

    @property
    def T2(self) -> float:
        return float(self.horizon[1])

    def with_numerics(self, **changes) -> "TimeDependentManifold":
        return replace(self, numerics=replace(self.numerics, **changes))

    def drift(self, t: float, p: Point) -> np.ndarray:
        if self.drift_fn is None:
            return np.zeros_like(p.coords)
        return np.asarray(self.drift_fn(t, p), dtype=float)

    def has_closed(self, name: str) -> bool:
        return self.closed is not None and getattr(self.closed, name, None) is not None


def _use_closed(man: TimeDependentManifold, name: str, method: str) -> bool:
    if method == "numeric":
        return False
    if method == "closed":
        if not man.has_closed(name):
            raise GeometryError(f"{man.name} has no closed form for {name}")
        return True
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    return man.has_closed(name)


def _as_point(x) -> Point:
    return x if isinstance(x, Point) else Point(x)


def _components(v) -> np.ndarray:
    return v.components if isinstance(v, TangentVector) else np.asarray(v, dtype=float)


def _check_domain(man: TimeDependentManifold, p: Point) -> None:
    inside = man.in_domain(p)
    if not np.all(inside):
        raise DomainError(f"point outside chart domain of {man.name}: {p.coords[~inside][:3]}")


def _check_time(man: TimeDependentManifold, t: float) -> None:
    eps = 1e-12 * max(1.0, abs(man.T2))
    if not man.T1 - eps <= t <= man.T2 + eps:
        raise GeometryError(f"t={t} outside horizon [{man.T1}, {man.T2}]")


# ---------------------------------------------------------------- metric


def _metric(man: TimeDependentManifold, t: float, p: Point) -> np.ndarray:
    return np.asarray(man.metric_fn(t, p), dtype=float)


def _dgdt(man: TimeDependentManifold, t: float, p: Point) -> np.ndarray:
    if man.dgdt_fn is not None:
        return np.asarray(man.dgdt_fn(t, p), dtype=float)
    dt = man.numerics.dt_fd or 1e-5 * (man.T2 - man.T1)
    return (_metric(man, t + dt, p) - _metric(man, t - dt, p)) / (2 * dt)


def metric_at(man: TimeDependentManifold, t: float, x) -> MetricSample:
    """Metric and its time derivative at ``(t, x)``.

    ``dgdt`` uses the model's analytic formula when present, otherwise a
    central difference in t with step ``numerics.dt_fd``.
    """
    p = _as_point(x)
    _check_time(man, t)
    _check_domain(man, p)
    g = _metric(man, t, p)
    if not np.allclose(g, np.swapaxes(g, -1, -2), rtol=1e-12, atol=1e-14):
        raise GeometryError("metric is not symmetric")
    if np.min(np.linalg.eigvalsh(g)) <= man.numerics.pd_floor:
        raise GeometryError(f"metric of {man.name} is not positive definite at t={t}")
    dg = _dgdt(man, t, p)
    return MetricSample(g=g, dgdt=0.5 * (dg + np.swapaxes(dg, -1, -2)))


def inner(man: TimeDependentManifold, t: float, x, u, w) -> np.ndarray:
    p = _as_point(x)
    if man.has_closed("inner"):
        return man.closed.inner(t, p, _components(u), _components(w))
    g = _metric(man, t, p)
    return np.einsum("...i,...ij,...j->...", _components(u), g, _components(w))


def norm(man: TimeDependentManifold, t: float, x, v) -> np.ndarray:
    return np.sqrt(np.maximum(inner(man, t, x, v, v), 0.0))


# 4th-order central stencil
_STENCIL = ((-2, 1.0 / 12), (-1, -8.0 / 12), (1, 8.0 / 12), (2, -1.0 / 12))


def _spatial_derivative(fn: Callable[[Point], np.ndarray], p: Point, h: float) -> np.ndarray:
    """d fn / dx^l stacked on a new axis right after the batch axes."""
    m = p.dim
    out = []
    for l in range(m):
        acc = 0.0
        for k, w in _STENCIL:
            shifted = p.coords.copy()
            shifted[..., l] += k * h
            acc = acc + w * fn(Point(shifted, p.chart))
        out.append(acc / h)
    return np.stack(out, axis=len(p.shape))


def _christoffel_from_metric(man: TimeDependentManifold, t: float, p: Point) -> np.ndarray:
    g = _metric(man, t, p)
    dg = _spatial_derivative(lambda q: _metric(man, t, q), p, man.numerics.dx_fd)  # [l, i, j]
    try:
        ginv = np.linalg.inv(g)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("singular metric") from exc
    # lowered[l, i, j] = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    lowered = 0.5 * (np.einsum("...ijl->...lij", dg) + np.einsum("...jil->...lij", dg) - dg)
    return np.einsum("...kl,...lij->...kij", ginv, lowered)


def christoffel(man: TimeDependentManifold, t: float, x, method: str = "auto") -> np.ndarray:
    """Christoffel symbols ``G[..., k, i, j]`` = Gamma^k_{ij}."""
    p = _as_point(x)
    if _use_closed(man, "christoffel", method):
        return np.asarray(man.closed.christoffel(t, p), dtype=float)
    return _christoffel_from_metric(man, t, p)


def _gamma_fn(man: TimeDependentManifold, t: float, method: str) -> Callable[[Point], np.ndarray]:
    if method != "fd" and man.has_closed("christoffel"):
        return lambda q: man.closed.christoffel(t, q)
    return lambda q: _christoffel_from_metric(man, t, q)


# ------------------------------------------------------------- geodesics


def _rk4_geodesic(man, t, p: Point, v: np.ndarray, n_steps: int, carry=None, keep: int = 0,
                  gamma_method: str = "auto"):
    """Integrate x'' = -Gamma(x)(x', x') over parameter [0, 1].

    ``carry`` (shape ``(..., r, m)``) is parallel transported alongside.
    Returns (end coords, end velocity, carried vectors, samples).
    """
    gam = _gamma_fn(man, t, gamma_method)
    chart = p.chart
    x = p.coords.copy()
    vel = np.array(v, dtype=float, copy=True)
    w = None if carry is None else np.array(carry, dtype=float, copy=True)
    h = 1.0 / n_steps

    def rhs(x_, v_, w_):
        G = gam(Point(x_, chart))
        a = -np.einsum("...kij,...i,...j->...k", G, v_, v_)
        dw = None if w_ is None else -np.einsum("...kij,...i,...rj->...rk", G, v_, w_)
        return v_, a, dw

    samples = []
    every = max(1, n_steps // keep) if keep else 0
    for n in range(n_steps):
        k1 = rhs(x, vel, w)
        k2 = rhs(x + 0.5 * h * k1[0], vel + 0.5 * h * k1[1], None if w is None else w + 0.5 * h * k1[2])
        k3 = rhs(x + 0.5 * h * k2[0], vel + 0.5 * h * k2[1], None if w is None else w + 0.5 * h * k2[2])
        k4 = rhs(x + h * k3[0], vel + h * k3[1], None if w is None else w + h * k3[2])
        x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        vel = vel + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if w is not None:
            w = w + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        _check_domain(man, Point(x, chart))
        if every and ((n + 1) % every == 0 or n + 1 == n_steps):
            samples.append(((n + 1) * h, x.copy(), vel.copy()))
    return x, vel, w, samples


def _n_steps(length: np.ndarray, step: float) -> int:
    L = float(np.max(length)) if np.size(length) else 0.0
    return max(100, int(math.ceil(L / step)))


def exp_map(man: TimeDependentManifold, t: float, x, v, method: str = "auto") -> Point:
    """Endpoint of the g(t)-geodesic from ``x`` with initial velocity ``v``."""
    p = _as_point(x)
    comps = _components(v)
    if _use_closed(man, "exp", method):
        return man.closed.exp(t, p, comps)
    _check_domain(man, p)
    length = norm(man, t, p, comps)
    if not np.any(length > 0):
        return Point(p.coords.copy(), p.chart)
    xe, _, _, _ = _rk4_geodesic(man, t, p, comps, _n_steps(length, man.numerics.rk4_step))
    return Point(xe, p.chart)


def _geodesic_from_velocity(man, t, p: Point, v: np.ndarray, samples: int = 0) -> Geodesic:
    length = norm(man, t, p, v)
    safe = np.where(length > 0, length, 1.0)
    unit = v / safe[..., None]
    n = _n_steps(length, man.numerics.rk4_step)
    xe, ve, _, smp = _rk4_geodesic(man, t, p, v, n, keep=samples)
    end = Point(xe, p.chart)
    table = tuple((u * length, Point(xs, p.chart), TangentVector(Point(xs, p.chart), vs / safe[..., None]))
                  for u, xs, vs in smp)
    return Geodesic(start=p, velocity=TangentVector(p, unit), t=t, length=length, end=end,
                    end_velocity=TangentVector(end, ve / safe[..., None]), samples=table)


def parallel_transport(man: TimeDependentManifold, t: float, geo: Geodesic, v, method: str = "auto") -> TangentVector:
    """Parallel transport of ``v`` (based at ``geo.start``) to ``geo.end``."""
    comps = _components(v)
    full = geo.velocity.components * np.asarray(geo.length)[..., None]
    if _use_closed(man, "transport", method):
        return TangentVector(geo.end, man.closed.transport(t, geo.start, full, comps, end=geo.end))
    if geo.start.chart.shape and np.any(geo.start.chart != geo.end.chart):
        raise DomainError("numeric transport needs start and end in one chart")
    n = _n_steps(geo.length, man.numerics.transport_step)
    _, _, w, _ = _rk4_geodesic(man, t, geo.start, full, n, carry=comps[..., None, :])
    return TangentVector(geo.end, w[..., 0, :])


def _to_chart(man: TimeDependentManifold, q: Point, chart: np.ndarray) -> Point:
    if np.all(q.chart == chart):
        return q
    if not man.has_closed("chart_map"):
        raise DomainError("points lie in different charts and the model has no chart map")
    return man.closed.chart_map(q, chart)


def _shoot(man: TimeDependentManifold, t: float, p: Point, q: Point) -> np.ndarray:
    """Initial velocity v with exp_p(v) = q by damped Newton shooting."""
    cfg = man.numerics
    q = _to_chart(man, q, p.chart)
    target = q.coords
    v = target - p.coords  # straight line in the chart

    def endpoint(vel):
        length = norm(man, t, p, vel)
        xe, _, _, _ = _rk4_geodesic(man, t, p, vel, _n_steps(length, cfg.rk4_step))
        return xe

    def residual(vel):
        return endpoint(vel) - target

    r = residual(v)
    m = p.dim
    for _ in range(cfg.shoot_max_iter):
        err = np.max(np.abs(r))
        if err < cfg.shoot_tol:
            return v
        eps = 1e-7 * np.maximum(1.0, np.max(np.abs(v), axis=-1, keepdims=True))
        cols = []
        for j in range(m):
            dv = np.zeros_like(v)
            dv[..., j] = eps[..., 0]
            cols.append((residual(v + dv) - residual(v - dv)) / (2 * eps))
        J = np.stack(cols, axis=-1)
        try:
            step = np.linalg.solve(J, -r[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise GeodesicSolveError("singular shooting Jacobian", float(err)) from exc
        lam = 1.0
        base = np.linalg.norm(r, axis=-1)
        for _ in range(12):
            trial = v + lam * step
            try:
                rt = residual(trial)
            except DomainError:
                lam *= 0.5
                continue
            if np.all(np.linalg.norm(rt, axis=-1) < base + 1e-15):
                break
            lam *= 0.5
        else:
            raise GeodesicSolveError("line search failed", float(err))
        v, r = trial, rt
    err = float(np.max(np.abs(r)))
    if err < cfg.shoot_tol * 10:
        return v
    raise GeodesicSolveError("shooting did not converge", err)


def _same_point(man, p: Point, q: Point) -> np.ndarray:
    same_chart = p.chart == q.chart
    close = np.max(np.abs(p.coords - q.coords), axis=-1) <= man.numerics.point_tol
    return same_chart & close


def minimal_geodesic(man: TimeDependentManifold, t: float, x, y, method: str = "auto", samples: int = 0) -> Geodesic:
    """Minimal unit-speed g(t)-geodesic from ``x`` to ``y``.

    The numeric path only certifies a geodesic, not minimality; near the cut
    locus of a generic metric the result is approximate.
    """
    p, q = _as_point(x), _as_point(y)
    if _use_closed(man, "log", method):
        v = man.closed.log(t, p, q)
        length = norm(man, t, p, v)
        safe = np.where(length > 0, length, 1.0)
        unit = v / safe[..., None]
        end_vel = man.closed.transport(t, p, v, unit, end=q)
        near = man.closed.near_cut(t, p, q) if man.has_closed("near_cut") else np.zeros(p.shape, bool)
        geo = Geodesic(start=p, velocity=TangentVector(p, unit), t=t, length=length, end=q,
                       end_velocity=TangentVector(q, end_vel), near_cut=near)
        if samples:
            us = np.linspace(0.0, 1.0, samples + 1)[1:]
            table = []
            for u in us:
                pt = man.closed.exp(t, p, v * u)
                vel = man.closed.transport(t, p, v * u, unit, end=pt)
                table.append((u * length, pt, TangentVector(pt, vel)))
            geo = replace(geo, samples=tuple(table))
        return geo
    _check_domain(man, p)
    v = _shoot(man, t, p, q)
    geo = _geodesic_from_velocity(man, t, p, v, samples=samples)
    return replace(geo, end=_to_chart(man, q, p.chart))


def distance(man: TimeDependentManifold, t: float, x, y, method: str = "auto") -> np.ndarray:
    """d_{g(t)}(x, y); exactly 0 for points equal within ``point_tol``."""
    p, q = _as_point(x), _as_point(y)
    if _use_closed(man, "distance", method):
        d = np.asarray(man.closed.distance(t, p, q), dtype=float)
        d = np.where(_same_point(man, p, q), 0.0, d)
    else:
        same = _same_point(man, p, q)
        if np.all(same):
            return np.zeros(p.shape)
        d = np.asarray(minimal_geodesic(man, t, p, q, method="numeric").length, dtype=float)
        d = np.where(same, 0.0, d)
    return d


# -------------------------------------------------------------- curvature


def _ricci_tensor_numeric(man: TimeDependentManifold, t: float, p: Point, gamma_method: str = "auto") -> np.ndarray:
    gam = _gamma_fn(man, t, gamma_method)
    G = gam(p)
    dG = _spatial_derivative(gam, p, man.numerics.dx_fd)  # [l, k, i, j] = d_l Gamma^k_ij
    # Ric_jk = d_i G^i_jk - d_k G^i_ji + G^i_ip G^p_jk - G^i_kp G^p_ji
    term1 = np.einsum("...iijk->...jk", dG)
    term2 = np.einsum("...kiji->...jk", dG)
    term3 = np.einsum("...iip,...pjk->...jk", G, G)
    term4 = np.einsum("...ikp,...pji->...jk", G, G)
    ric = term1 - term2 + term3 - term4
    return 0.5 * (ric + np.swapaxes(ric, -1, -2))


def ricci_tensor(man: TimeDependentManifold, t: float, x, method: str = "auto") -> np.ndarray:
    p = _as_point(x)
    if _use_closed(man, "ricci_tensor", method):
        return np.asarray(man.closed.ricci_tensor(t, p), dtype=float)
    return _ricci_tensor_numeric(man, t, p, gamma_method="fd" if method == "numeric" else "auto")


def ricci(man: TimeDependentManifold, t: float, x, u, w, method: str = "auto") -> np.ndarray:
    """Ric_{g(t)}(u, w) at ``x``."""
    ric = ricci_tensor(man, t, x, method=method)
    return np.einsum("...i,...ij,...j->...", _components(u), ric, _components(w))


# ------------------------------------------------------------------ frames


def orthonormal_frame(man: TimeDependentManifold, t: float, x) -> np.ndarray:
    """g(t)-orthonormal frame as matrix columns ``F[..., :, a]``.

    Gram-Schmidt on the coordinate basis in index order; this equals the
    inverse of the upper Cholesky factor of g.
    """
    p = _as_point(x)
    if man.has_closed("frame"):
        return man.closed.frame(t, p)
    g = _metric(man, t, p)
    try:
        L = np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("degenerate metric in frame construction") from exc
    eye = np.broadcast_to(np.eye(p.dim), g.shape)
    return np.linalg.solve(np.swapaxes(L, -1, -2), eye)


def covariant_derivative(man: TimeDependentManifold, t: float, x, field_fn: Callable[[float, Point], np.ndarray],
                         v, method: str = "auto") -> np.ndarray:
    """(nabla_v F)^k = v^i d_i F^k + Gamma^k_ij v^i F^j, F given in components."""
    p = _as_point(x)
    vv = _components(v)
    F = np.asarray(field_fn(t, p), dtype=float)
    dF = _spatial_derivative(lambda q: np.asarray(field_fn(t, q), dtype=float), p, man.numerics.dx_fd)  # [i, k]
    G = christoffel(man, t, p, method=method)
    return np.einsum("...i,...ik->...k", vv, dF) + np.einsum("...kij,...i,...j->...k", G, vv, F)


def kappa_estimate(man: TimeDependentManifold, region, t_grid) -> float:
    """Half the largest |generalised eigenvalue| of (dg/dt, g) over samples.

    By Gronwall this certifies exp(-2 kappa |t-s|) g(s) <= g(t) <= exp(2 kappa |t-s|) g(s)
    on the sampled set.
    """
    pts = region if isinstance(region, Point) else Point(np.asarray([_as_point(r).coords for r in region]),
                                                        np.asarray([_as_point(r).chart for r in region]))
    ts = np.asarray(list(t_grid), dtype=float)
    if pts.coords.size == 0 or ts.size == 0:
        raise ValueError("kappa_estimate needs a non-empty region and time grid")
    worst = 0.0
    for t in ts:
        sample = metric_at(man, float(t), pts)
        L = np.linalg.cholesky(sample.g)
        Linv = np.linalg.inv(L)
        sym = Linv @ sample.dgdt @ np.swapaxes(Linv, -1, -2)
        eig = np.linalg.eigvalsh(0.5 * (sym + np.swapaxes(sym, -1, -2)))
        worst = max(worst, float(np.max(np.abs(eig))))
    return 0.5 * worst
