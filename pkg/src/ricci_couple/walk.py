"""Time-inhomogeneous geodesic random walk.

One step from ``x`` at grid time ``t_n`` is

    x' = exp^{(t_n)}_x( alpha * sqrt(m+2) * Phi(x) xi + alpha^2 * Z(t_n, x) ),

with ``xi`` uniform on the unit ball of R^m and ``Phi`` the Gram-Schmidt
frame of :func:`geometry.orthonormal_frame`.  Grid times are
``t_n = min(T1 + alpha^2 n, T2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional, Sequence

import numpy as np

from . import geometry as geo
from .geometry import DomainError, GeometryError, Point, TimeDependentManifold

BLOCK = 256  # draws are pulled per trial in blocks of this many steps


class StepError(RuntimeError):
    def __init__(self, message: str, partial: Any = None, step: int | None = None):
        super().__init__(message)
        self.partial = partial
        self.step = step


@dataclass(frozen=True)
class StepGrid:
    alpha: float
    times: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def fraction(self, n: int) -> float:
        """Length of step n in units of alpha^2 (1 except possibly the last)."""
        return float((self.times[n + 1] - self.times[n]) / self.alpha**2)


def make_grid(t1: float, t2: float, alpha: float) -> StepGrid:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    h = alpha * alpha
    n_full = int(math.floor((t2 - t1) / h + 1e-9))
    times = t1 + h * np.arange(n_full + 1)
    times = np.minimum(times, t2)
    if t2 - times[-1] > 1e-12 * max(1.0, abs(t2)):
        times = np.append(times, t2)
    times[-1] = t2
    return StepGrid(alpha=alpha, times=times)


def trial_rng(master_seed: int, trial: int, tag: int = 0) -> np.random.Generator:
    """Independent stream for one trial, derived from (master_seed, tag, trial)."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(tag), int(trial))))


def draw_uniform_ball(rng: np.random.Generator, m: int, size: int | None = None) -> np.ndarray:
    """Uniform draws on the closed unit ball of R^m.

    Gaussian direction times U^{1/m} radius; covariance is I/(m+2).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    shape = (m,) if size is None else (size, m)
    d = rng.standard_normal(shape)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    r = rng.random(() if size is None else size) ** (1.0 / m)
    return d * np.asarray(r)[..., None]


class NoiseStream:
    """Per-trial ball draws served one step at a time for a batch of trials.

    ``next(rows)`` serves only the listed trials.  Rows may only shrink over
    time: a trial left out at a refill is never served again, so its stream
    is simply not advanced.
    """

    def __init__(self, rngs: Sequence[np.random.Generator], m: int):
        self.rngs = list(rngs)
        self.m = m
        self._block = None
        self._pos = BLOCK

    def next(self, rows: Optional[np.ndarray] = None) -> np.ndarray:
        if self._pos == BLOCK:
            # step-major layout keeps each step's slice contiguous
            if rows is None:
                self._block = np.stack([draw_uniform_ball(r, self.m, BLOCK) for r in self.rngs], axis=1)
            else:
                self._block = np.full((BLOCK, len(self.rngs), self.m), np.nan)
                for i in rows:
                    self._block[:, i] = draw_uniform_ball(self.rngs[i], self.m, BLOCK)
            self._pos = 0
        out = self._block[self._pos]
        self._pos += 1
        return out if rows is None else out[rows]


def noise_vectors(man: TimeDependentManifold, t: float, x: Point, draw: np.ndarray, want_frame: bool = True):
    """Frame at x and the scaled noise sqrt(m+2) Phi(x) xi.

    Conformal models expose the frame as a scalar multiple of the identity;
    the frame matrix is then only built when asked for.
    """
    c = math.sqrt(man.dim + 2)
    if man.has_closed("frame_scale"):
        s = man.closed.frame_scale(t, x)
        F = np.eye(man.dim) * s[..., None, None] if want_frame else None
        return F, c * s[..., None] * draw
    F = geo.orthonormal_frame(man, t, x)
    return F, c * (F @ draw[..., None])[..., 0]


def _recharted_exp(man: TimeDependentManifold, t: float, x: Point, v: np.ndarray) -> tuple[Point, np.ndarray]:
    """exp with one retry in the backup chart; returns (point, switched flags)."""
    try:
        out = geo.exp_map(man, t, x, v)
    except DomainError as exc:
        rechart = man.extras.get("recharter")
        if rechart is None:
            raise StepError(f"exp left the chart domain: {exc}") from exc
        x2, v2 = rechart(x, v)
        try:
            out = geo.exp_map(man, t, x2, v2)
        except DomainError as exc2:
            raise StepError(f"exp left both charts: {exc2}") from exc2
    return out, out.chart != x.chart


def walk_step(man: TimeDependentManifold, t_n: float, x, alpha: float, draw, frac: float = 1.0) -> Point:
    """One step of the walk; ``frac`` < 1 only for a short final step."""
    p = x if isinstance(x, Point) else Point(x)
    _, xi = noise_vectors(man, t_n, p, np.asarray(draw, float))
    inc = alpha * xi + alpha * alpha * man.drift(t_n, p)
    out, _ = _recharted_exp(man, t_n, p, frac * inc)
    return out


@dataclass(frozen=True, eq=False)
class WalkPath:
    """One walk, or a batch of walks along the leading axis.

    ``points.coords`` has shape (..., N+1, m); ``frames`` (..., N, m, m);
    ``draws`` and ``increments`` (..., N, m).
    """

    manifold: TimeDependentManifold = field(repr=False)
    grid: StepGrid
    points: Point
    frames: np.ndarray
    draws: np.ndarray
    increments: np.ndarray
    chart_switch: np.ndarray

    @property
    def alpha(self) -> float:
        return self.grid.alpha

    def point(self, n: int) -> Point:
        return Point(self.points.coords[..., n, :], self.points.chart[..., n])

    @property
    def final(self) -> Point:
        return self.point(self.grid.n_steps)


def _broadcast_start(x0, batch: int) -> Point:
    p = x0 if isinstance(x0, Point) else Point(x0)
    coords = np.broadcast_to(p.coords, (batch, p.dim)).copy()
    return Point(coords, np.broadcast_to(p.chart, (batch,)).copy())


def run_walks(man: TimeDependentManifold, x0, alpha: float, rngs: Sequence[np.random.Generator],
              record: bool = True):
    """Simulate ``len(rngs)`` independent walks from ``x0``.

    With ``record`` a batched :class:`WalkPath` is returned, otherwise only
    the terminal points and per-trial chart-switch counts.
    """
    grid = make_grid(man.T1, man.T2, alpha)
    B = len(rngs)
    x = _broadcast_start(x0, B)
    stream = NoiseStream(rngs, man.dim)
    pts, frames, draws, incs, switches = [x], [], [], [], []
    n_switch = np.zeros(B, dtype=np.int64)
    for n in range(grid.n_steps):
        t = float(grid.times[n])
        xi = stream.next()
        F, noise = noise_vectors(man, t, x, xi, want_frame=record)
        inc = alpha * noise + alpha * alpha * man.drift(t, x)
        try:
            x_new, sw = _recharted_exp(man, t, x, grid.fraction(n) * inc)
        except (StepError, GeometryError) as exc:
            partial = None
            if record and n > 0:
                partial = _assemble(man, make_grid(man.T1, float(grid.times[n]), alpha) if n > 0 else grid,
                                    pts, frames, draws, incs, switches)
            raise StepError(str(exc), partial=partial, step=n) from exc
        n_switch += sw
        if record:
            frames.append(F)
            draws.append(xi)
            incs.append(inc)
            switches.append(sw)
            pts.append(x_new)
        x = x_new
    if not record:
        return x, n_switch
    return _assemble(man, grid, pts, frames, draws, incs, switches)


def _assemble(man, grid, pts, frames, draws, incs, switches) -> WalkPath:
    coords = np.stack([p.coords for p in pts], axis=-2)
    charts = np.stack([p.chart for p in pts], axis=-1)
    m = man.dim
    B = coords.shape[0]
    return WalkPath(
        manifold=man,
        grid=grid,
        points=Point(coords, charts),
        frames=np.stack(frames, axis=1) if frames else np.zeros((B, 0, m, m)),
        draws=np.stack(draws, axis=1) if draws else np.zeros((B, 0, m)),
        increments=np.stack(incs, axis=1) if incs else np.zeros((B, 0, m)),
        chart_switch=np.stack(switches, axis=1) if switches else np.zeros((B, 0), bool),
    )


def _squeeze(path: WalkPath) -> WalkPath:
    return WalkPath(
        manifold=path.manifold, grid=path.grid, points=path.points[0], frames=path.frames[0],
        draws=path.draws[0], increments=path.increments[0], chart_switch=path.chart_switch[0],
    )


def simulate(man: TimeDependentManifold, x0, alpha: float, rng: np.random.Generator) -> WalkPath:
    """Simulate one walk on the full grid."""
    try:
        return _squeeze(run_walks(man, x0, alpha, [rng]))
    except StepError as exc:
        if exc.partial is not None:
            exc.partial = _squeeze(exc.partial)
        raise


def interpolate(path: WalkPath, t: float) -> Point:
    """Point of the continuously interpolated walk at time ``t``."""
    man, grid = path.manifold, path.grid
    if not grid.times[0] - 1e-12 <= t <= grid.times[-1] + 1e-12:
        raise ValueError(f"t={t} outside [{grid.times[0]}, {grid.times[-1]}]")
    n = int(np.searchsorted(grid.times, t, side="right")) - 1
    n = min(max(n, 0), grid.n_steps)
    if n == grid.n_steps or t == grid.times[n]:
        return path.point(n)
    frac = (t - grid.times[n]) / grid.alpha**2
    x = path.point(n)
    return geo.exp_map(man, float(grid.times[n]), x, frac * path.increments[..., n, :])


class RadialSeries(NamedTuple):
    times: np.ndarray
    values: np.ndarray
    near_cut: np.ndarray


def radial_series(path: WalkPath) -> RadialSeries:
    """d_{g(t_n)}(o, X(t_n)) on the grid, with near-cut-locus flags (base point o, unregularised)."""
    man = path.manifold
    o = man.base_point
    vals, flags = [], []
    for n, t in enumerate(path.grid.times):
        x = path.point(n)
        ob = Point(np.broadcast_to(o.coords, x.coords.shape), np.broadcast_to(o.chart, x.shape))
        vals.append(geo.distance(man, float(t), ob, x))
        flags.append(man.closed.near_cut(float(t), ob, x) if man.has_closed("near_cut")
                     else np.zeros(x.shape, bool))
    return RadialSeries(path.grid.times.copy(), np.stack(vals, axis=-1), np.stack(flags, axis=-1))
