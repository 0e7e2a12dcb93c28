"""Concrete time-dependent manifolds with closed-form geometry.

All shipped closed-form models are conformal rescalings ``g(t) = c(t) g_K``
of a constant-curvature space form ``g_K`` (K = 0, +1, -1).  Geodesics,
exponential map and parallel transport of ``c g_K`` coincide with those of
``g_K``; only lengths scale by ``sqrt(c)``, and the Ricci tensor is scale
invariant, ``Ric = K (m - 1) g_K``.

With ``s = t - T1`` and ``beta_k`` the time change ``(e^{ks} - 1)/k``,
``c(t) = e^{-ks} (c0 + sigma (m - 1) beta_k(s))`` solves
``dg/dt = Ric - k g`` exactly (sigma = K).
"""
from __future__ import annotations

import importlib
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .geometry import (
    DomainError,
    Point,
    TimeDependentManifold,
    NumericsConfig,
    covariant_derivative,
    metric_at,
    orthonormal_frame,
    ricci,
)


class InvalidSpec(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


KINDS = ("euclidean", "sphere_backward_ricci", "sphere_static", "hyperbolic_scaled", "chart_generic")

_ALLOWED_PARAMS = {
    "euclidean": {"k"},
    "sphere_backward_ricci": {"c0", "k"},
    "sphere_static": {"c0"},
    "hyperbolic_scaled": {"c0", "k"},
    "chart_generic": set(),
}
_REQUIRED_PARAMS = {
    "sphere_backward_ricci": {"c0"},
    "sphere_static": {"c0"},
    "hyperbolic_scaled": {"c0"},
}

HYPERBOLIC_CLAMP = 1.0 - 1e-6
SPHERE_SWITCH = 2.0
NEAR_CUT_ANGLE = 1e-3


class DriftSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: Literal["zero", "radial"] = "zero"
    strength: float = 0.0  # lambda in Z = -lambda (x - o)


class ModelSpec(BaseModel):
    """Deserialisation target of the config ``model`` section."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["euclidean", "sphere_backward_ricci", "sphere_static", "hyperbolic_scaled", "chart_generic"]
    dim: int = Field(ge=1)
    horizon: tuple[float, float] = (0.0, 1.0)
    parameters: dict[str, float] = Field(default_factory=dict)
    drift: DriftSpec = Field(default_factory=DriftSpec)
    base_point: Optional[list[float]] = None
    # chart_generic only: "module:callable" import strings
    metric: Optional[str] = None
    dgdt: Optional[str] = None
    domain_radius: Optional[float] = None
    sample_radius: Optional[float] = None

    @field_validator("horizon")
    @classmethod
    def _ordered(cls, v):
        if not v[0] < v[1]:
            raise ValueError("horizon must satisfy T1 < T2")
        return v


def beta_time(k: float, s):
    """(e^{ks} - 1)/k with the k -> 0 limit s."""
    s = np.asarray(s, dtype=float)
    if abs(k) * float(np.max(np.abs(s), initial=0.0)) < 1e-6:
        ks = k * s
        return s * (1 + ks / 2 + ks * ks / 6)
    return np.expm1(k * s) / k


# ------------------------------------------------------------ space forms


@dataclass(frozen=True, eq=False)
class SpaceForm:
    """Closed forms for ``c(t) g_K`` in stereographic / Poincare charts.

    K = +1 uses two stereographic charts (chart 0 projects from the north
    pole, chart 1 from the south pole); K = -1 the Poincare ball; K = 0 the
    identity chart.
    """

    K: int
    dim: int
    scale: Callable[[float], float]
    dscale: Callable[[float], float]

    # --- chart machinery
    def conformal(self, y: np.ndarray) -> np.ndarray:
        r2 = np.sum(y * y, axis=-1)
        if self.K == 0:
            return np.ones_like(r2)
        if self.K > 0:
            return 2.0 / (1.0 + r2)
        return 2.0 / (1.0 - r2)

    def _sign(self, chart) -> np.ndarray:
        return np.where(np.asarray(chart) == 0, 1.0, -1.0)

    def ambient_inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        prod = a * b
        if self.K < 0:
            return np.sum(prod[..., :-1], axis=-1) - prod[..., -1]
        return np.sum(prod, axis=-1)

    def to_ambient(self, p: Point) -> np.ndarray:
        y = p.coords
        if self.K == 0:
            return y.copy()
        r2 = np.sum(y * y, axis=-1, keepdims=True)
        if self.K > 0:
            s = self._sign(p.chart)[..., None]
            return np.concatenate([2 * y, s * (r2 - 1)], axis=-1) / (1 + r2)
        return np.concatenate([2 * y, 1 + r2], axis=-1) / (1 - r2)

    def jacobian(self, p: Point) -> np.ndarray:
        """dX/dy with shape (..., m+1, m) (or (..., m, m) when flat)."""
        y = p.coords
        m = self.dim
        eye = np.broadcast_to(np.eye(m), y.shape[:-1] + (m, m))
        if self.K == 0:
            return eye.copy()
        r2 = np.sum(y * y, axis=-1)[..., None, None]
        outer = y[..., :, None] * y[..., None, :]
        if self.K > 0:
            q = 1 + r2
            top = 2 * eye / q - 4 * outer / q**2
            s = self._sign(p.chart)[..., None, None]
            last = s * 4 * y[..., None, :] / q**2
        else:
            q = 1 - r2
            top = 2 * eye / q + 4 * outer / q**2
            last = 4 * y[..., None, :] / q**2
        return np.concatenate([top, last], axis=-2)

    def push(self, p: Point, v: np.ndarray) -> np.ndarray:
        if self.K == 0:
            return np.array(v, dtype=float, copy=True)
        return np.einsum("...ij,...j->...i", self.jacobian(p), v)

    def pull(self, p: Point, V: np.ndarray) -> np.ndarray:
        if self.K == 0:
            return np.array(V, dtype=float, copy=True)
        J = self.jacobian(p)
        GV = V.copy()
        if self.K < 0:
            GV[..., -1] *= -1
        lam2 = self.conformal(p.coords) ** 2
        return np.einsum("...ij,...i->...j", J, GV) / lam2[..., None]

    def from_ambient(self, X: np.ndarray, prefer) -> Point:
        m = self.dim
        if self.K == 0:
            return Point(X.copy(), 0)
        if self.K < 0:
            y = X[..., :m] / (1 + X[..., m:])
            p = Point(y, 0)
            if np.any(np.sum(y * y, axis=-1) >= HYPERBOLIC_CLAMP**2):
                raise DomainError("point reached the Poincare-ball clamp")
            return p
        prefer = np.broadcast_to(np.asarray(prefer, dtype=np.int64), X.shape[:-1])
        s = self._sign(prefer)[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            y = X[..., :m] / (1 - s * X[..., m:])
            r = np.sqrt(np.sum(y * y, axis=-1))
            switch = ~(r <= SPHERE_SWITCH)
            y_other = X[..., :m] / (1 + s * X[..., m:])
        chart = np.where(switch, 1 - prefer, prefer)
        y = np.where(switch[..., None], y_other, y)
        return Point(y, chart)

    def chart_map(self, q: Point, chart) -> Point:
        if self.K <= 0:
            return q
        X = self.to_ambient(q)
        chart = np.broadcast_to(np.asarray(chart, dtype=np.int64), q.shape)
        s = self._sign(chart)[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            y = X[..., : self.dim] / (1 - s * X[..., self.dim:])
        if not np.all(np.isfinite(y)):
            raise DomainError("point is the projection pole of the requested chart")
        return Point(y, chart)

    def in_domain(self, p: Point) -> np.ndarray:
        r2 = np.sum(p.coords**2, axis=-1)
        if self.K < 0:
            return r2 < HYPERBOLIC_CLAMP**2
        return np.isfinite(r2)

    # --- metric
    def metric(self, t: float, p: Point) -> np.ndarray:
        lam2 = self.conformal(p.coords) ** 2
        return self.scale(t) * lam2[..., None, None] * np.eye(self.dim)

    def dmetric(self, t: float, p: Point) -> np.ndarray:
        lam2 = self.conformal(p.coords) ** 2
        return self.dscale(t) * lam2[..., None, None] * np.eye(self.dim)

    # --- closed forms consumed by geometry
    def _angle_and_dir(self, X, V):
        theta = np.sqrt(np.maximum(self.ambient_inner(V, V), 0.0))
        safe = np.where(theta > 0, theta, 1.0)
        return theta, V / safe[..., None]

    def exp(self, t: float, p: Point, v: np.ndarray) -> Point:
        if self.K == 0:
            return Point(p.coords + v, p.chart)
        X = self.to_ambient(p)
        theta, U = self._angle_and_dir(X, self.push(p, v))
        th = theta[..., None]
        if self.K > 0:
            Y = np.cos(th) * X + np.sin(th) * U
            Y /= np.linalg.norm(Y, axis=-1, keepdims=True)
        else:
            Y = np.cosh(th) * X + np.sinh(th) * U
        return self.from_ambient(Y, p.chart)

    def _angle(self, X, Y):
        c = self.ambient_inner(X, Y)
        if self.K > 0:
            W = Y - c[..., None] * X
            s = np.linalg.norm(W, axis=-1)
            return np.arctan2(s, c), W, s
        W = Y + c[..., None] * X  # c = -cosh(theta)
        s = np.sqrt(np.maximum(self.ambient_inner(W, W), 0.0))
        return np.arcsinh(s), W, s

    def log(self, t: float, p: Point, q: Point) -> np.ndarray:
        if self.K == 0:
            return q.coords - p.coords
        X, Y = self.to_ambient(p), self.to_ambient(q)
        theta, W, s = self._angle(X, Y)
        degenerate = s < 1e-12
        safe = np.where(degenerate, 1.0, s)
        V = (theta / safe)[..., None] * W
        if self.K > 0 and np.any(degenerate & (theta > 1.0)):
            # antipodal: every direction minimises; take the unit velocity with
            # lexicographically largest chart components, i.e. along +e_1
            e1 = np.zeros_like(p.coords)
            e1[..., 0] = 1.0
            E = self.push(p, e1)
            E /= np.linalg.norm(E, axis=-1, keepdims=True)
            V = np.where((degenerate & (theta > 1.0))[..., None], math.pi * E, V)
        V = np.where((degenerate & (theta <= 1.0))[..., None], 0.0, V)
        return self.pull(p, V)

    def transport(self, t: float, p: Point, v: np.ndarray, w: np.ndarray, end: Optional[Point] = None) -> np.ndarray:
        if self.K == 0:
            return np.array(w, dtype=float, copy=True)
        X = self.to_ambient(p)
        theta, U = self._angle_and_dir(X, self.push(p, v))
        Wa = self.push(p, w) if w.ndim == p.coords.ndim else np.einsum("...ij,...rj->...ri", self.jacobian(p), w)
        if Wa.ndim > X.ndim:
            a = self.ambient_inner(Wa, U[..., None, :])[..., None]
            th = theta[..., None, None]
            Ub, Xb = U[..., None, :], X[..., None, :]
        else:
            a = self.ambient_inner(Wa, U)[..., None]
            th = theta[..., None]
            Ub, Xb = U, X
        if self.K > 0:
            PW = Wa + a * ((np.cos(th) - 1) * Ub - np.sin(th) * Xb)
        else:
            PW = Wa + a * ((np.cosh(th) - 1) * Ub + np.sinh(th) * Xb)
        if end is None:
            end = self.exp(t, p, v)
        if PW.ndim > X.ndim:
            return np.stack([self.pull(end, PW[..., r, :]) for r in range(PW.shape[-2])], axis=-2)
        return self.pull(end, PW)

    def distance(self, t: float, p: Point, q: Point) -> np.ndarray:
        if self.K == 0:
            d = np.linalg.norm(q.coords - p.coords, axis=-1)
        else:
            d, _, _ = self._angle(self.to_ambient(p), self.to_ambient(q))
        return math.sqrt(self.scale(t)) * d

    def near_cut(self, t: float, p: Point, q: Point) -> np.ndarray:
        if self.K <= 0:
            return np.zeros(p.shape, dtype=bool)
        d, _, _ = self._angle(self.to_ambient(p), self.to_ambient(q))
        return d > math.pi - NEAR_CUT_ANGLE

    def christoffel(self, t: float, p: Point) -> np.ndarray:
        y = p.coords
        m = self.dim
        if self.K == 0:
            return np.zeros(y.shape[:-1] + (m, m, m))
        r2 = np.sum(y * y, axis=-1, keepdims=True)
        dphi = -2 * y / (1 + r2) if self.K > 0 else 2 * y / (1 - r2)
        eye = np.eye(m)
        # Gamma^k_ij = d_ik dphi_j + d_jk dphi_i - d_ij dphi_k
        return (np.einsum("ik,...j->...kij", eye, dphi) + np.einsum("jk,...i->...kij", eye, dphi)
                - np.einsum("ij,...k->...kij", eye, dphi))

    def ricci_tensor(self, t: float, p: Point) -> np.ndarray:
        lam2 = self.conformal(p.coords) ** 2
        return self.K * (self.dim - 1) * lam2[..., None, None] * np.eye(self.dim)

    def inner(self, t: float, p: Point, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        uw = u[..., 0] * w[..., 0]
        for i in range(1, self.dim):
            uw = uw + u[..., i] * w[..., i]
        if self.K == 0:
            return self.scale(t) * uw
        return self.scale(t) * self.conformal(p.coords) ** 2 * uw

    def frame_scale(self, t: float, p: Point) -> np.ndarray:
        if self.K == 0:
            return np.full(p.shape, 1.0 / math.sqrt(self.scale(t)))
        return 1.0 / (math.sqrt(self.scale(t)) * self.conformal(p.coords))

    def frame(self, t: float, p: Point) -> np.ndarray:
        if self.K == 0:
            return np.broadcast_to(np.eye(self.dim) / math.sqrt(self.scale(t)), p.shape + (self.dim, self.dim))
        lam = self.conformal(p.coords)
        return np.eye(self.dim) / (math.sqrt(self.scale(t)) * lam)[..., None, None]


# ----------------------------------------------------------------- build


def _scale_functions(kind: str, m: int, params: dict, t1: float):
    k = float(params.get("k", 0.0))
    if kind == "euclidean":
        c0, sigma = 1.0, 0
    elif kind in ("sphere_backward_ricci", "hyperbolic_scaled"):
        c0 = float(params["c0"])
        sigma = 1 if kind == "sphere_backward_ricci" else -1
    else:  # sphere_static
        c0 = float(params["c0"])
        return (lambda t: c0), (lambda t: 0.0)

    def scale(t):
        s = t - t1
        return math.exp(-k * s) * (c0 + sigma * (m - 1) * float(beta_time(k, s)))

    def dscale(t):
        return sigma * (m - 1) - k * scale(t)

    return scale, dscale


def _import(path: str) -> Callable:
    module, _, attr = path.partition(":")
    if not attr:
        raise InvalidSpec("metric", f"expected 'module:callable', got {path!r}")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise InvalidSpec("metric", f"cannot import {path!r}: {exc}") from exc


def _validate(spec: ModelSpec) -> None:
    allowed = _ALLOWED_PARAMS[spec.kind]
    extra = set(spec.parameters) - allowed
    if extra:
        raise InvalidSpec("parameters", f"unknown for {spec.kind}: {sorted(extra)}")
    missing = _REQUIRED_PARAMS.get(spec.kind, set()) - set(spec.parameters)
    if missing:
        raise InvalidSpec("parameters", f"missing for {spec.kind}: {sorted(missing)}")
    if spec.kind in ("sphere_backward_ricci", "sphere_static", "hyperbolic_scaled"):
        if spec.dim < 2:
            raise InvalidSpec("dim", f"{spec.kind} needs dim >= 2")
        if spec.parameters["c0"] <= 0:
            raise InvalidSpec("parameters.c0", "must be positive")
    if spec.kind == "chart_generic" and spec.metric is None:
        raise InvalidSpec("metric", "chart_generic needs a metric import path")
    if spec.kind != "chart_generic" and (spec.metric or spec.dgdt):
        raise InvalidSpec("metric", "only chart_generic accepts metric/dgdt callables")
    if spec.drift.name == "radial" and spec.kind != "euclidean":
        raise InvalidSpec("drift", "the radial drift is shipped for euclidean only")
    if spec.base_point is not None and len(spec.base_point) != spec.dim:
        raise InvalidSpec("base_point", f"expected {spec.dim} coordinates")


def _sampler(radius: float, m: int, chart: int = 0):
    def sample(rng: np.random.Generator, n: int) -> Point:
        d = rng.standard_normal((n, m))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        r = radius * rng.random(n) ** (1.0 / m)
        return Point(d * r[:, None], chart)
    return sample


def build(spec: ModelSpec, numerics: Optional[NumericsConfig] = None) -> TimeDependentManifold:
    """Instantiate the manifold described by ``spec``."""
    if isinstance(spec, dict):
        spec = ModelSpec(**spec)
    _validate(spec)
    m = spec.dim
    t1, t2 = spec.horizon
    numerics = numerics or NumericsConfig()
    o = Point(np.zeros(m) if spec.base_point is None else np.asarray(spec.base_point, float), 0)

    drift_fn = None
    if spec.drift.name == "radial":
        lam = spec.drift.strength
        drift_fn = lambda t, p: -lam * (p.coords - o.coords)

    if spec.kind == "chart_generic":
        metric_fn = _import(spec.metric)
        dgdt_fn = _import(spec.dgdt) if spec.dgdt else None
        radius = spec.domain_radius
        in_domain = (lambda p: np.sum(p.coords**2, axis=-1) < radius**2) if radius else (
            lambda p: np.ones(p.shape, dtype=bool))
        sample_r = spec.sample_radius or (0.5 * radius if radius else 1.0)
        return TimeDependentManifold(
            dim=m, horizon=(t1, t2), metric_fn=metric_fn, dgdt_fn=dgdt_fn, drift_fn=drift_fn,
            base_point=o, in_domain=in_domain, numerics=numerics, name="chart_generic",
            extras={"spec": spec, "sampler": _sampler(sample_r, m), "embed": lambda p: p.coords},
        )

    scale, dscale = _scale_functions(spec.kind, m, spec.parameters, t1)
    for t in np.linspace(t1, t2, 65):
        if not scale(float(t)) > 0:
            raise InvalidSpec("parameters", f"scale c(t) must stay positive on the horizon (c({t:.4g}) <= 0)")

    K = {"euclidean": 0, "sphere_backward_ricci": 1, "sphere_static": 1, "hyperbolic_scaled": -1}[spec.kind]
    form = SpaceForm(K=K, dim=m, scale=scale, dscale=dscale)
    c_min = min(scale(float(t)) for t in np.linspace(t1, t2, 65))
    c_max = max(scale(float(t)) for t in np.linspace(t1, t2, 65))
    if K > 0:
        inj, lower, default_r = math.pi * math.sqrt(c_min), (m - 1) / c_max, 1.5
    elif K < 0:
        inj, lower, default_r = math.inf, -(m - 1) / c_min, 0.8
    else:
        inj, lower, default_r = math.inf, 0.0, 2.0
    radius = spec.sample_radius or default_r
    if K < 0 and radius >= HYPERBOLIC_CLAMP:
        raise InvalidSpec("sample_radius", "must lie inside the Poincare ball")
    return TimeDependentManifold(
        dim=m, horizon=(t1, t2), metric_fn=form.metric, dgdt_fn=form.dmetric, drift_fn=drift_fn,
        base_point=o, closed=form, in_domain=form.in_domain, curvature_lower_bound=lower,
        injectivity_hint=inj, numerics=numerics, name=spec.kind,
        extras={"spec": spec, "sampler": _sampler(radius, m), "embed": form.to_ambient, "form": form},
    )


# -------------------------------------------------------- curvature check


@dataclass
class ConditionReport:
    k: float
    max_violation: float
    witnesses: list = field(default_factory=list)

    def holds(self, tol: float = 1e-6) -> bool:
        return self.max_violation <= tol


def condition_expression(man: TimeDependentManifold, t: float, p: Point, v: np.ndarray, k: float,
                         method: str = "auto") -> np.ndarray:
    """(2 (nabla Z)^flat + dg/dt - Ric + k g)(v, v); <= 0 is the curvature condition."""
    sample = metric_at(man, t, p)
    gvv = np.einsum("...i,...ij,...j->...", v, sample.g, v)
    dvv = np.einsum("...i,...ij,...j->...", v, sample.dgdt, v)
    ric = ricci(man, t, p, v, v, method=method)
    if man.drift_fn is None:
        nz = 0.0
    else:
        grad = covariant_derivative(man, t, p, man.drift_fn, v, method=method)
        nz = np.einsum("...i,...ij,...j->...", grad, sample.g, v)
    return 2 * nz + dvv - ric + k * gvv


def verify_condition(man: TimeDependentManifold, k: float, sample_count: int, seed: int,
                     method: str = "auto", n_witnesses: int = 3) -> ConditionReport:
    """Sample random (t, x, unit v) and report the largest condition violation."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    sampler = man.extras.get("sampler") or _sampler(1.0, man.dim)
    ts = man.T1 + (man.T2 - man.T1) * rng.random(sample_count)
    pts = sampler(rng, sample_count)
    dirs = rng.standard_normal((sample_count, man.dim))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    values = np.empty(sample_count)
    vecs = np.empty((sample_count, man.dim))
    for i in range(sample_count):
        p = pts[i]
        F = orthonormal_frame(man, float(ts[i]), p)
        v = F @ dirs[i]
        vecs[i] = v
        values[i] = float(condition_expression(man, float(ts[i]), p, v, k, method=method))
    order = np.argsort(-values)[:n_witnesses]
    witnesses = [
        {"t": float(ts[i]), "coords": pts.coords[i].tolist(), "chart": int(pts.chart[i]),
         "v": vecs[i].tolist(), "value": float(values[i])}
        for i in order
    ]
    return ConditionReport(k=k, max_violation=float(np.max(values)), witnesses=witnesses)


def embed(man: TimeDependentManifold, p: Point) -> np.ndarray:
    fn = man.extras.get("embed")
    return fn(p) if fn is not None else p.coords
