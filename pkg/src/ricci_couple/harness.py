"""Monte Carlo experiments on top of the walk and coupling modules.

Trials are split into fixed-size chunks that run serially or in a process
pool.  Trial ``i`` of an experiment always draws from the stream
``(seed, tag, i)``, and chunk results are concatenated in trial order, so
reports do not depend on the worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from scipy.integrate import quad

from . import geometry as geo
from .comparison import beta, coupling_bound
from .coupling import CouplingKind, CouplingStepError, coupling_tail, run_coupled
from .geometry import Point, TimeDependentManifold
from .models import ModelSpec, build, embed, verify_condition
from .stats import ks_normal, ks_two_sample, wilson_interval
from .walk import StepError, run_walks, trial_rng

__all__ = [
    "ExperimentConfig", "ObservableSpec", "CouplingSection", "SimulationError",
    "TailReport", "GradientReport", "ContractionReport", "MarginalReport", "InvarianceReport",
    "run_tail_experiment", "run_gradient_experiment", "run_contraction_experiment",
    "run_marginal_experiment", "run_invariance_experiment", "wilson_interval", "start_points",
]

# stream tags, one per kind of simulated object
TAG_TAIL, TAG_GRAD, TAG_DIRECT_X, TAG_DIRECT_Y, TAG_CONTRACT, TAG_MARGINAL, TAG_REF1, TAG_REF2, TAG_WALK = range(1, 10)


class SimulationError(RuntimeError):
    def __init__(self, message: str, first_trial: int, last_trial: int, step: Optional[int] = None):
        super().__init__(message)
        self.first_trial = first_trial
        self.last_trial = last_trial
        self.step = step


# ------------------------------------------------------------------ config


class CouplingSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["reflection", "parallel"] = "reflection"
    delta_couple: Optional[float] = Field(default=None, gt=0)

    def to_kind(self) -> CouplingKind:
        return CouplingKind(kind=self.kind, delta_couple=self.delta_couple)


class ObservableSpec(BaseModel):
    """Bounded test function f evaluated on the embedded point.

    sign: sign of coordinate ``axis`` (osc 2); hemisphere: indicator of
    coordinate ``axis`` > 0 (osc 1); constant: ``value`` (osc 0).
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: Literal["sign", "hemisphere", "constant"]
    axis: int = Field(default=0, ge=0)
    value: float = 1.0

    @property
    def osc(self) -> float:
        return {"sign": 2.0, "hemisphere": 1.0, "constant": 0.0}[self.name]

    def __call__(self, ambient: np.ndarray) -> np.ndarray:
        if self.name == "constant":
            return np.full(ambient.shape[:-1], float(self.value))
        c = ambient[..., self.axis]
        return np.sign(c) if self.name == "sign" else (c > 0).astype(float)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelSpec
    alphas: list[float] = Field(min_length=1)
    trials: int = Field(ge=100)
    seed: int = Field(default=0, ge=0)
    coupling: CouplingSection = Field(default_factory=CouplingSection)
    report_times: list[float] = Field(default_factory=list)
    k: float = 0.0
    x1: Optional[list[float]] = None
    x2: Optional[list[float]] = None
    separation: Optional[float] = Field(default=None, ge=0)
    observable: Optional[ObservableSpec] = None
    probe_spacings: list[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05])
    probe_center: Optional[list[float]] = None
    chunk_size: int = Field(default=2500, ge=1)
    condition_samples: int = Field(default=64, ge=1)
    numerics: dict = Field(default_factory=dict)  # NumericsConfig overrides

    @field_validator("alphas")
    @classmethod
    def _decreasing(cls, v):
        if any(a <= 0 for a in v):
            raise ValueError("alphas must be positive")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("alphas must be strictly decreasing")
        return v

    @field_validator("probe_spacings")
    @classmethod
    def _positive(cls, v):
        if not v or any(h <= 0 for h in v):
            raise ValueError("probe spacings must be positive")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        t1, t2 = self.model.horizon
        for T in self.report_times:
            if not t1 <= T <= t2:
                raise ValueError(f"report time {T} outside the horizon [{t1}, {t2}]")
        if (self.x1 is None) != (self.x2 is None):
            raise ValueError("give both x1 and x2, or neither")
        if self.x1 is not None and self.separation is not None:
            raise ValueError("give either x1/x2 or separation, not both")
        for name in ("x1", "x2", "probe_center"):
            v = getattr(self, name)
            if v is not None and len(v) != self.model.dim:
                raise ValueError(f"{name} needs {self.model.dim} coordinates")
        return self


# ------------------------------------------------------------ engine


@dataclass(frozen=True)
class _Job:
    kind: str
    spec: ModelSpec
    seed: int
    tag: int
    start: int
    stop: int
    alpha: float
    x1: tuple
    x2: tuple = ()
    coupling: Optional[CouplingSection] = None
    k_weight: float = 0.0
    freeze: bool = False
    numerics: dict = field(default_factory=dict)


def _build(spec: ModelSpec, numerics: dict) -> TimeDependentManifold:
    return build(spec, geo.NumericsConfig(**numerics))


def _execute(job: _Job) -> dict:
    man = _build(job.spec, job.numerics)
    rngs = [trial_rng(job.seed, i, job.tag) for i in range(job.start, job.stop)]
    try:
        if job.kind == "walk":
            x, n_switch = run_walks(man, Point(*job.x1), job.alpha, rngs, record=False)
            return {"end": embed(man, x), "chart_switches": n_switch}
        b = run_coupled(man, Point(*job.x1), Point(*job.x2), job.alpha, rngs, job.coupling.to_kind(),
                        k_weight=job.k_weight, freeze_coupled=job.freeze)
    except (StepError, CouplingStepError, geo.GeometryError) as exc:
        step = getattr(exc, "step", None)
        raise SimulationError(f"trials {job.start}..{job.stop - 1}: {exc}", job.start, job.stop - 1, step) from exc
    return {
        "coupling_time": b.coupling_time, "coupled_last_step": b.coupled_last_step,
        "near_cut_steps": b.near_cut_steps, "chart_switches": b.chart_switches,
        "step_increase_max": b.step_increase_max, "path_increase_max": b.path_increase_max,
        "isometry_error": np.array([b.isometry_error]),
        "end1": embed(man, b.x1_end), "end2": embed(man, b.x2_end),
    }


def run_jobs(jobs: list[_Job], workers: int = 1) -> dict:
    """Run chunks and concatenate their arrays in trial order."""
    if workers <= 1 or len(jobs) <= 1:
        parts = [_execute(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_execute, jobs))
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def _chunks(n: int, size: int):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def _point_tuple(p: Point) -> tuple:
    return (np.asarray(p.coords, float), int(np.asarray(p.chart)))


def start_points(man: TimeDependentManifold, cfg: ExperimentConfig) -> tuple[Point, Point]:
    """Explicit x1/x2, or a pair at g(T1)-distance ``separation`` centred on the base point."""
    if cfg.x1 is not None:
        return Point(cfg.x1), Point(cfg.x2)
    sep = 1.0 if cfg.separation is None else cfg.separation
    return probe_pair(man, man.base_point, sep)


def probe_pair(man: TimeDependentManifold, center: Point, h: float) -> tuple[Point, Point]:
    """exp_c(+h/2 e) and exp_c(-h/2 e), e the first g(T1)-orthonormal frame vector."""
    e = np.asarray(geo.orthonormal_frame(man, man.T1, center))[..., :, 0]
    return (geo.exp_map(man, man.T1, center, 0.5 * h * e),
            geo.exp_map(man, man.T1, center, -0.5 * h * e))


def _condition_warning(man: TimeDependentManifold, cfg: ExperimentConfig) -> Optional[str]:
    rep = verify_condition(man, cfg.k, cfg.condition_samples, cfg.seed)
    if rep.holds(1e-6):
        return None
    return f"curvature condition with k={cfg.k} violated (max {rep.max_violation:.3g})"


def _coupled_jobs(cfg: ExperimentConfig, tag: int, alpha: float, x1: Point, x2: Point, **kw) -> list[_Job]:
    return [
        _Job(kind="coupled", spec=cfg.model, seed=cfg.seed, tag=tag, start=s, stop=e, alpha=alpha,
             x1=_point_tuple(x1), x2=_point_tuple(x2), coupling=cfg.coupling, numerics=cfg.numerics, **kw)
        for s, e in _chunks(cfg.trials, cfg.chunk_size)
    ]


def _walk_jobs(cfg: ExperimentConfig, tag: int, alpha: float, x: Point, trials: Optional[int] = None) -> list[_Job]:
    return [
        _Job(kind="walk", spec=cfg.model, seed=cfg.seed, tag=tag, start=s, stop=e, alpha=alpha, x1=_point_tuple(x),
             numerics=cfg.numerics)
        for s, e in _chunks(trials or cfg.trials, cfg.chunk_size)
    ]


def _rung_tag(tag: int, rung: int) -> int:
    return 100 * tag + rung


# ------------------------------------------------------------ tail


@dataclass(frozen=True)
class TailRow:
    alpha: float
    T: float
    tail: float
    ci_lo: float
    ci_hi: float
    bound: float
    passed: bool

    @property
    def halfwidth(self) -> float:
        return 0.5 * (self.ci_hi - self.ci_lo)


@dataclass
class TailReport:
    a: float
    k: float
    rows: list[TailRow]
    diagnostics: list[dict]
    warning: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_dict(self) -> dict:
        return {"a": self.a, "k": self.k, "passed": self.passed, "warning": self.warning,
                "rows": [asdict(r) | {"halfwidth": r.halfwidth} for r in self.rows],
                "diagnostics": self.diagnostics}


def run_tail_experiment(cfg: ExperimentConfig, workers: int = 1) -> TailReport:
    """Empirical P[tau* > T] per alpha rung against chi(a / 2 sqrt(beta(T - T1)))."""
    man = _build(cfg.model, cfg.numerics)
    x1, x2 = start_points(man, cfg)
    a = float(geo.distance(man, man.T1, x1, x2))
    times = cfg.report_times or [man.T2]
    rows, diags = [], []
    for i, alpha in enumerate(cfg.alphas):
        out = run_jobs(_coupled_jobs(cfg, _rung_tag(TAG_TAIL, i), alpha, x1, x2, freeze=True), workers)
        for est in coupling_tail(out["coupling_time"], times):
            bound = coupling_bound(a, cfg.k, est.T - man.T1)
            rows.append(TailRow(alpha=alpha, T=est.T, tail=est.tail, ci_lo=est.ci_lo, ci_hi=est.ci_hi,
                                bound=bound, passed=bool(est.tail <= bound + 3 * est.halfwidth)))
        diags.append({
            "alpha": alpha,
            "delta_couple": cfg.coupling.to_kind().delta(alpha, man.dim),
            "coupled_in_final_step": float(np.mean(out["coupled_last_step"])),
            "near_cut_steps": int(np.sum(out["near_cut_steps"])),
            "chart_switches": int(np.sum(out["chart_switches"])),
            "isometry_error": float(np.max(out["isometry_error"])),
        })
    return TailReport(a=a, k=cfg.k, rows=rows, diagnostics=diags, warning=_condition_warning(man, cfg))


# ------------------------------------------------------------ gradient


@dataclass(frozen=True)
class GradientRow:
    alpha: float
    h: float
    distance: float
    quotient: float  # coupled estimator
    err: float
    direct: float  # two independent single-walk batches
    direct_err: float
    bound: float
    passed: bool
    agree: bool


@dataclass
class GradientReport:
    t: float
    osc: float
    rows: list[GradientRow]
    trend: Optional[float] = None  # Richardson extrapolation from the two finest spacings
    warning: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_dict(self) -> dict:
        return {"t": self.t, "osc": self.osc, "passed": self.passed, "trend": self.trend, "warning": self.warning,
                "rows": [asdict(r) for r in self.rows]}


def _mean_err(x: np.ndarray) -> tuple[float, float]:
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size))


def run_gradient_experiment(cfg: ExperimentConfig, workers: int = 1, direct: bool = True) -> GradientReport:
    """|P_t f(x) - P_t f(y)| / d(x, y) for probe pairs around the centre, t = T2."""
    if cfg.observable is None:
        raise ValueError("gradient experiment needs an observable")
    f = cfg.observable
    man = _build(cfg.model, cfg.numerics)
    center = Point(cfg.probe_center) if cfg.probe_center is not None else man.base_point
    horizon = man.T2 - man.T1
    bound = f.osc / math.sqrt(2 * math.pi * beta(cfg.k, horizon))
    rows = []
    for i, alpha in enumerate(cfg.alphas):
        for j, h in enumerate(cfg.probe_spacings):
            x, y = probe_pair(man, center, h)
            d = float(geo.distance(man, man.T1, x, y))
            tag = _rung_tag(TAG_GRAD, 10 * i + j)
            out = run_jobs(_coupled_jobs(cfg, tag, alpha, x, y, freeze=True), workers)
            q, e = _mean_err(f(out["end1"]) - f(out["end2"]))
            dq, de = math.nan, math.nan
            if direct:
                fx = f(run_jobs(_walk_jobs(cfg, _rung_tag(TAG_DIRECT_X, 10 * i + j), alpha, x), workers)["end"])
                fy = f(run_jobs(_walk_jobs(cfg, _rung_tag(TAG_DIRECT_Y, 10 * i + j), alpha, y), workers)["end"])
                mx, ex = _mean_err(fx)
                my, ey = _mean_err(fy)
                dq, de = abs(mx - my) / d, math.hypot(ex, ey) / d
            q, e = abs(q) / d, e / d
            agree = True if not direct else bool(abs(q - dq) <= 3 * math.hypot(e, de) + 1e-12)
            rows.append(GradientRow(alpha=alpha, h=h, distance=d, quotient=q, err=e, direct=dq, direct_err=de,
                                    bound=bound, passed=bool(q <= bound + 3 * e + 1e-12), agree=agree))
    trend = None
    finest = [r for r in rows if r.alpha == cfg.alphas[-1]]
    hs = sorted(finest, key=lambda r: r.h)
    if len(hs) >= 2:
        r1, r2 = hs[0], hs[1]
        ratio = r2.h / r1.h
        trend = (ratio**2 * r1.quotient - r2.quotient) / (ratio**2 - 1)  # even-order error in h
    return GradientReport(t=man.T2, osc=f.osc, rows=rows, trend=trend, warning=_condition_warning(man, cfg))


# ---------------------------------------------------------- contraction

RATIO_BAND = (0.75, 1.5)  # measured ratio over the alpha ratio; [1.5, 3] when alpha halves


@dataclass
class ContractionReport:
    k: float
    alphas: list[float]
    step_p99: list[float]
    path_p99: list[float]
    step_max: list[float]
    constants: list[float]  # step_p99 / alpha
    ratios: list[float]  # step_p99 between consecutive rungs
    passed: bool
    warning: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def run_contraction_experiment(cfg: ExperimentConfig, workers: int = 1) -> ContractionReport:
    """Per-step positive increase of e^{k(t-T1)/2} d under the parallel coupling."""
    man = _build(cfg.model, cfg.numerics)
    x1, x2 = start_points(man, cfg)
    par = cfg.model_copy(update={"coupling": CouplingSection(kind="parallel", delta_couple=cfg.coupling.delta_couple)})
    step_p99, path_p99, step_max = [], [], []
    for i, alpha in enumerate(cfg.alphas):
        out = run_jobs(_coupled_jobs(par, _rung_tag(TAG_CONTRACT, i), alpha, x1, x2, k_weight=cfg.k), workers)
        step_p99.append(float(np.percentile(out["step_increase_max"], 99)))
        path_p99.append(float(np.percentile(out["path_increase_max"], 99)))
        step_max.append(float(np.max(out["step_increase_max"])))
    constants = [s / a for s, a in zip(step_p99, cfg.alphas)]
    ratios, ok = [], True
    if all(v == 0.0 for v in step_p99):
        ratios = [math.nan] * (len(step_p99) - 1)
    else:
        for (a0, s0), (a1, s1) in zip(zip(cfg.alphas, step_p99), zip(cfg.alphas[1:], step_p99[1:])):
            r = s0 / s1 if s1 > 0 else math.inf
            ratios.append(r)
            scaled = r / (a0 / a1)
            ok = ok and RATIO_BAND[0] <= scaled <= RATIO_BAND[1]
    return ContractionReport(k=cfg.k, alphas=list(cfg.alphas), step_p99=step_p99, path_p99=path_p99,
                             step_max=step_max, constants=constants, ratios=ratios, passed=ok,
                             warning=_condition_warning(man, cfg))


# ------------------------------------------------------ marginal laws


@dataclass
class MarginalReport:
    alpha: float
    ks1: list[float]  # per embedded coordinate, coupled X1 vs reference walks
    ks2: list[float]
    reference_trials: int

    @property
    def worst(self) -> float:
        return max(self.ks1 + self.ks2)


def run_marginal_experiment(cfg: ExperimentConfig, workers: int = 1, reference_factor: int = 4) -> MarginalReport:
    """Terminal law of each coupled component against independent single walks."""
    man = _build(cfg.model, cfg.numerics)
    x1, x2 = start_points(man, cfg)
    alpha = cfg.alphas[-1]
    out = run_jobs(_coupled_jobs(cfg, TAG_MARGINAL, alpha, x1, x2), workers)
    n_ref = reference_factor * cfg.trials
    ref1 = run_jobs(_walk_jobs(cfg, TAG_REF1, alpha, x1, n_ref), workers)["end"]
    ref2 = run_jobs(_walk_jobs(cfg, TAG_REF2, alpha, x2, n_ref), workers)["end"]
    dims = out["end1"].shape[-1]
    ks1 = [ks_two_sample(out["end1"][:, c], ref1[:, c]) for c in range(dims)]
    ks2 = [ks_two_sample(out["end2"][:, c], ref2[:, c]) for c in range(dims)]
    return MarginalReport(alpha=alpha, ks1=ks1, ks2=ks2, reference_trials=n_ref)


@dataclass
class InvarianceReport:
    alphas: list[float]
    ks: list[list[float]]  # per alpha, per coordinate

    @property
    def worst(self) -> list[float]:
        return [max(v) for v in self.ks]


def run_invariance_experiment(cfg: ExperimentConfig, workers: int = 1) -> InvarianceReport:
    """KS distance of X(T2) - x0 per coordinate to N(0, T2 - T1) on a flat model."""
    if cfg.model.kind != "euclidean" or cfg.model.drift.name != "zero":
        raise ValueError("the Gaussian reference law needs the driftless euclidean model")
    man = _build(cfg.model, cfg.numerics)
    x0 = Point(cfg.x1) if cfg.x1 is not None else man.base_point
    var, _ = quad(lambda t: 1.0 / man.closed.scale(t), man.T1, man.T2)
    scale = math.sqrt(var)
    ks = []
    for i, alpha in enumerate(cfg.alphas):
        end = run_jobs(_walk_jobs(cfg, _rung_tag(TAG_WALK, i), alpha, x0), workers)["end"]
        disp = end - x0.coords
        ks.append([ks_normal(disp[:, c], scale) for c in range(man.dim)])
    return InvarianceReport(alphas=list(cfg.alphas), ks=ks)
