"""Couplings of two geodesic random walks by reflection and by parallel transport.

Both particles consume the same ball draw.  Off the diagonal the second
particle's noise is the first one's, carried along the minimal g(t_n)
geodesic from X1 to X2 (parallel kind) and then reflected in the
hyperplane orthogonal to that geodesic (reflection kind).  Once the
distance falls to ``delta_couple`` the pair is glued: X2 := X1 for the rest
of the run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from . import geometry as geo
from .geometry import GeometryError, Point, TangentVector, TimeDependentManifold
from .stats import wilson_interval
from .walk import (
    NoiseStream,
    StepError,
    StepGrid,
    _broadcast_start,
    _recharted_exp,
    make_grid,
    noise_vectors,
)


class CouplingStepError(RuntimeError):
    def __init__(self, message: str, partial=None, step: Optional[int] = None):
        super().__init__(message)
        self.partial = partial
        self.step = step


# increases below this relative size are rounding in the distance, not growth
ROUNDOFF = 16 * np.finfo(float).eps


def default_delta(alpha: float, m: int) -> float:
    return 0.5 * alpha * math.sqrt(m + 2)


@dataclass(frozen=True)
class CouplingKind:
    kind: Literal["reflection", "parallel"] = "reflection"
    delta_couple: Optional[float] = None  # None -> default_delta(alpha, m)

    def __post_init__(self):
        if self.kind not in ("reflection", "parallel"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.delta_couple is not None and not self.delta_couple > 0:
            raise ValueError("delta_couple must be positive")

    def delta(self, alpha: float, m: int) -> float:
        return self.delta_couple if self.delta_couple is not None else default_delta(alpha, m)


def _g_inner(man, t, p, u, w):
    return geo.inner(man, t, p, u, w)


def reflection_map(man: TimeDependentManifold, t: float, g: geo.Geodesic, v) -> TangentVector:
    """Transport ``v`` along ``g`` and reflect in the hyperplane orthogonal to its end velocity."""
    moved = geo.parallel_transport(man, t, g, v).components
    e = g.end_velocity.components
    a = _g_inner(man, t, g.end, moved, e)
    return TangentVector(g.end, moved - 2 * a[..., None] * e)


def _transport_pair(man, t, x1: Point, x2: Point, xi1: np.ndarray):
    """Minimal geodesic x1 -> x2 and the transport of (xi1, unit velocity) to x2."""
    if man.has_closed("log") and man.has_closed("transport"):
        v = man.closed.log(t, x1, x2)
        d = geo.norm(man, t, x1, v)
        safe = np.where(d > 0, d, 1.0)
        unit = v / safe[..., None]
        both = man.closed.transport(t, x1, v, np.stack([xi1, unit], axis=-2), end=x2)
        near = man.closed.near_cut(t, x1, x2) if man.has_closed("near_cut") else np.zeros(x1.shape, bool)
        return unit, both[..., 0, :], both[..., 1, :], near
    g = geo.minimal_geodesic(man, t, x1, x2)
    moved = geo.parallel_transport(man, t, g, xi1).components
    return g.velocity.components, moved, g.end_velocity.components, np.asarray(g.near_cut, bool)


def _second_noise(man, t, x1, x2, xi1, draw, kind: str, active: np.ndarray):
    """Noise for X2 and the first-variation increment lambda* = 2<xi1, gamma'(0)>."""
    B = x1.shape
    xi2 = np.array(xi1, copy=True)
    lam = np.zeros(B)
    near = np.zeros(B, bool)
    if np.any(~active):
        _, diag = noise_vectors(man, t, x2, draw, want_frame=False)
        xi2 = np.where(active[..., None], xi2, diag)
    if np.any(active):
        idx = slice(None) if np.all(active) else np.nonzero(active)[0]
        a1, a2 = (x1, x2) if isinstance(idx, slice) else (x1[idx], x2[idx])
        try:
            unit, moved, end_vel, nc = _transport_pair(man, t, a1, a2, xi1[idx])
        except GeometryError as exc:
            raise CouplingStepError(f"geodesic between coupled particles failed: {exc}") from exc
        if kind == "reflection":
            a = geo.inner(man, t, a2, moved, end_vel)
            moved = moved - 2 * a[..., None] * end_vel
            lam[idx] = 2 * geo.inner(man, t, a1, xi1[idx], unit)
        xi2[idx] = moved
        near[idx] = nc
    return xi2, lam, near


def coupled_step(man: TimeDependentManifold, t_n: float, x1, x2, alpha: float, draw, kind: CouplingKind,
                 frac: float = 1.0):
    """Advance both particles one step; returns (x1', x2', lambda_star)."""
    p1 = x1 if isinstance(x1, Point) else Point(x1)
    p2 = x2 if isinstance(x2, Point) else Point(x2)
    draw = np.asarray(draw, float)
    _, xi1 = noise_vectors(man, t_n, p1, draw)
    d = geo.distance(man, t_n, p1, p2)
    active = np.atleast_1d(d > man.numerics.point_tol)
    single = p1.coords.ndim == 1
    if single:
        p1b, p2b = p1[None], p2[None]
        xi1b, drawb = xi1[None], draw[None]
    else:
        p1b, p2b, xi1b, drawb = p1, p2, xi1, draw
    xi2, lam, _ = _second_noise(man, t_n, p1b, p2b, xi1b, drawb, kind.kind, active)
    n1 = frac * (alpha * xi1b + alpha**2 * man.drift(t_n, p1b))
    n2 = frac * (alpha * xi2 + alpha**2 * man.drift(t_n, p2b))
    y1, _ = _recharted_exp(man, t_n, p1b, n1)
    y2, _ = _recharted_exp(man, t_n, p2b, n2)
    if single:
        return y1[0], y2[0], float(lam[0])
    return y1, y2, lam


@dataclass(frozen=True, eq=False)
class CoupledTrajectory:
    """Coupled pair; arrays carry an optional leading batch axis.

    ``coupling_time`` is NaN when the pair never came within ``delta``.
    """

    grid: StepGrid
    kind: CouplingKind
    delta: float
    path1: Point  # coords (..., N+1, m)
    path2: Point
    distances: np.ndarray  # (..., N+1)
    coupling_time: np.ndarray
    stuck: np.ndarray  # (..., N+1)
    lambda_star: np.ndarray  # (..., N)
    near_cut_steps: np.ndarray
    isometry_error: float

    @property
    def coupled(self) -> np.ndarray:
        return np.isfinite(self.coupling_time)


@dataclass
class CoupledBatch:
    """Per-trial summary of a batch of coupled runs (no per-step storage)."""

    grid: StepGrid
    delta: float
    coupling_time: np.ndarray
    x1_end: Point
    x2_end: Point
    coupled_last_step: np.ndarray
    near_cut_steps: np.ndarray
    chart_switches: np.ndarray
    step_increase_max: np.ndarray  # max_n [e^{k t_{n+1}/2} d_{n+1} - e^{k t_n/2} d_n]_+
    path_increase_max: np.ndarray  # max_{s<t} [e^{kt/2} d_t - e^{ks/2} d_s]_+
    isometry_error: float
    distances: Optional[np.ndarray] = None
    lambda_star: Optional[np.ndarray] = None
    path1: Optional[Point] = None
    path2: Optional[Point] = None
    stuck: Optional[np.ndarray] = None


def _put(target: Point, rows, src: Point) -> None:
    target.coords[rows] = src.coords
    target.chart[rows] = src.chart


def run_coupled(man: TimeDependentManifold, x1, x2, alpha: float, rngs: Sequence[np.random.Generator],
                kind: CouplingKind, record: bool = False, k_weight: float = 0.0,
                freeze_coupled: bool = False) -> CoupledBatch:
    """Batched coupled simulation; trial i consumes only ``rngs[i]``.

    ``k_weight`` is the k in the weighted distance e^{kt/2} d used for the
    contraction statistics.  With ``freeze_coupled`` a pair stops moving
    once glued (its end points are then the meeting point), which is all
    that tail and gradient estimates need and saves most of the work.
    """
    if record and freeze_coupled:
        raise ValueError("record and freeze_coupled are exclusive")
    m = man.dim
    grid = make_grid(man.T1, man.T2, alpha)
    B = len(rngs)
    delta = kind.delta(alpha, m)
    P1 = _broadcast_start(x1, B)
    P2 = _broadcast_start(x2, B)
    stream = NoiseStream(rngs, m)

    t0 = float(grid.times[0])
    d = geo.distance(man, t0, P1, P2)
    stuck = d <= delta
    ctime = np.where(stuck, t0, np.nan)
    P2 = P1.where(stuck, P2)
    d = np.where(stuck, 0.0, d)

    weight = lambda t: math.exp(k_weight * (t - man.T1) / 2)
    D = weight(t0) * d
    running_min = D.copy()
    step_inc = np.zeros(B)
    path_inc = np.zeros(B)
    near_steps = np.zeros(B, dtype=np.int64)
    switches = np.zeros(B, dtype=np.int64)
    last_step = np.zeros(B, bool)
    iso_err = 0.0
    rec_d, rec_lam, rec_p1, rec_p2, rec_stuck = [d.copy()], [], [P1], [P2], [stuck.copy()]
    live = np.nonzero(~stuck)[0] if freeze_coupled else None

    for n in range(grid.n_steps):
        t = float(grid.times[n])
        t_next = float(grid.times[n + 1])
        if live is not None:
            if live.size == 0:
                break
            rows = slice(None) if live.size == B else live
            draw = stream.next(live if live.size < B else None)
            p1, p2 = (P1, P2) if live.size == B else (P1[rows], P2[rows])
        else:
            rows = slice(None)
            draw = stream.next()
            p1, p2 = P1, P2
        st, dd = stuck[rows], d[rows]
        try:
            _, xi1 = noise_vectors(man, t, p1, draw, want_frame=False)
            active = (~st) & (dd > man.numerics.point_tol)
            xi2, lam, near = _second_noise(man, t, p1, p2, xi1, draw, kind.kind, active)
            if np.any(active):
                diff = np.abs(geo.norm(man, t, p2, xi2) - geo.norm(man, t, p1, xi1))
                iso_err = max(iso_err, float(np.max(diff[active])))
            frac = grid.fraction(n)
            n1 = frac * (alpha * xi1 + alpha * alpha * man.drift(t, p1))
            n2 = frac * (alpha * xi2 + alpha * alpha * man.drift(t, p2))
            y1, s1 = _recharted_exp(man, t, p1, n1)
            y2, s2 = _recharted_exp(man, t, p2, n2)
        except (CouplingStepError, StepError, GeometryError) as exc:
            raise CouplingStepError(str(exc), step=n) from exc
        y2 = y1.where(st, y2)
        d_new = geo.distance(man, t_next, y1, y2)
        hit = (~st) & (d_new <= delta)
        ctime[rows] = np.where(hit, t_next, ctime[rows])
        if n == grid.n_steps - 1:
            last_step[rows] = hit
        st = st | hit
        y2 = y1.where(st, y2)
        d_new = np.where(st, 0.0, d_new)

        D_new = weight(t_next) * d_new
        Dr = D[rows]
        free = ~stuck[rows] | hit
        floor = ROUNDOFF * np.maximum(D_new, Dr)
        inc = np.where(free & (D_new - Dr > floor), D_new - Dr, 0.0)
        step_inc[rows] = np.maximum(step_inc[rows], inc)
        rmin = np.minimum(running_min[rows], Dr)
        running_min[rows] = rmin
        path_inc[rows] = np.maximum(path_inc[rows], np.where(free & (D_new - rmin > floor), D_new - rmin, 0.0))
        near_steps[rows] += near & active
        switches[rows] += s1 | s2
        stuck[rows] = st
        d[rows] = d_new
        D[rows] = D_new
        if isinstance(rows, slice):
            P1, P2 = y1, y2
        else:
            _put(P1, rows, y1)
            _put(P2, rows, y2)
        if live is not None and np.any(hit):
            live = np.nonzero(~stuck)[0]
        if record:
            rec_d.append(d.copy())
            rec_lam.append(lam)
            rec_p1.append(P1)
            rec_p2.append(P2)
            rec_stuck.append(stuck.copy())

    out = CoupledBatch(
        grid=grid, delta=delta, coupling_time=ctime, x1_end=P1, x2_end=P2, coupled_last_step=last_step,
        near_cut_steps=near_steps, chart_switches=switches, step_increase_max=step_inc,
        path_increase_max=path_inc, isometry_error=iso_err,
    )
    if record:
        out.distances = np.stack(rec_d, axis=-1)
        out.lambda_star = np.stack(rec_lam, axis=-1) if rec_lam else np.zeros((B, 0))
        out.path1 = Point(np.stack([p.coords for p in rec_p1], axis=-2), np.stack([p.chart for p in rec_p1], -1))
        out.path2 = Point(np.stack([p.coords for p in rec_p2], axis=-2), np.stack([p.chart for p in rec_p2], -1))
        out.stuck = np.stack(rec_stuck, axis=-1)
    return out


def simulate_coupled(man: TimeDependentManifold, x1, x2, alpha: float, rng: np.random.Generator,
                     kind: CouplingKind) -> CoupledTrajectory:
    """One coupled trajectory with full per-step record."""
    b = run_coupled(man, x1, x2, alpha, [rng], kind, record=True)
    return CoupledTrajectory(
        grid=b.grid, kind=kind, delta=b.delta, path1=b.path1[0], path2=b.path2[0], distances=b.distances[0],
        coupling_time=b.coupling_time[0], stuck=b.stuck[0], lambda_star=b.lambda_star[0],
        near_cut_steps=b.near_cut_steps[0], isometry_error=b.isometry_error,
    )


@dataclass(frozen=True)
class TailEstimate:
    T: float
    tail: float
    ci_lo: float
    ci_hi: float
    n: int

    @property
    def halfwidth(self) -> float:
        return 0.5 * (self.ci_hi - self.ci_lo)


def coupling_tail(coupling_times, report_times, level: float = 0.95) -> list[TailEstimate]:
    """Empirical P[tau* > T] with Wilson intervals.

    ``coupling_times`` is an array (NaN for never coupled) or a sequence of
    :class:`CoupledTrajectory`.
    """
    if isinstance(coupling_times, np.ndarray):
        ct = coupling_times.astype(float)
    else:
        ct = np.asarray([float(c.coupling_time) if isinstance(c, CoupledTrajectory) else
                         (np.nan if c is None else float(c)) for c in coupling_times])
    ct = np.ravel(ct)
    n = ct.size
    if n == 0:
        raise ValueError("empty batch")
    out = []
    for T in report_times:
        alive = int(np.sum(~(ct <= T)))
        lo, hi = wilson_interval(alive, n, level)
        out.append(TailEstimate(T=float(T), tail=alive / n, ci_lo=lo, ci_hi=hi, n=n))
    return out
