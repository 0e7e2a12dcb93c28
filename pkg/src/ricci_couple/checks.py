"""Closed-form versus numeric geometry probes and metric-growth certification."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import Point, TimeDependentManifold

TOLERANCES = {
    "exp": 1e-5,
    "distance": 1e-6,
    "transport": 1e-5,
    "transport_isometry": 1e-8,
    "christoffel": 1e-6,
    "ricci": 1e-5,
}


@dataclass
class ProbeReport:
    errors: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=lambda: dict(TOLERANCES))
    n_probes: int = 0

    @property
    def passed(self) -> bool:
        return all(self.errors[k] <= self.tolerances[k] for k in self.errors)

    def to_dict(self) -> dict:
        return {"n_probes": self.n_probes, "passed": self.passed,
                "errors": self.errors, "tolerances": self.tolerances}


def _random_unit(man: TimeDependentManifold, t: float, p: Point, rng) -> np.ndarray:
    d = rng.standard_normal(p.shape + (man.dim,))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    F = geo.orthonormal_frame(man, t, p)
    return np.einsum("...ij,...j->...i", F, d)


def geometry_probes(man: TimeDependentManifold, n: int = 100, seed: int = 0, max_length: float = 0.5) -> ProbeReport:
    """Max abs discrepancy of each closed form against the numeric path over ``n`` random probes."""
    if man.closed is None:
        raise ValueError("model has no closed forms to probe")
    rng = np.random.default_rng(seed)
    p = man.extras["sampler"](rng, n)
    t = float(man.T1 + (man.T2 - man.T1) * rng.random())
    length = max_length * min(1.0, man.injectivity_hint) * rng.random(n)
    v = _random_unit(man, t, p, rng) * length[:, None]
    w = _random_unit(man, t, p, rng)

    rep = ProbeReport(n_probes=n)
    q_closed = geo.exp_map(man, t, p, v, method="closed")
    if man.has_closed("chart_map"):
        q_closed = man.closed.chart_map(q_closed, p.chart)  # numeric integration never switches chart
    q_num = geo.exp_map(man, t, p, v, method="numeric")
    rep.errors["exp"] = float(np.max(np.abs(q_closed.coords - q_num.coords)))

    d_closed = geo.distance(man, t, p, q_closed, method="closed")
    g_num = geo.minimal_geodesic(man, t, p, q_closed, method="numeric")
    rep.errors["distance"] = float(np.max(np.abs(d_closed - np.asarray(g_num.length))))

    g_closed = geo.minimal_geodesic(man, t, p, q_closed, method="closed")
    w_closed = geo.parallel_transport(man, t, g_closed, w, method="closed").components
    w_num = geo.parallel_transport(man, t, g_num, w, method="numeric").components
    rep.errors["transport"] = float(np.max(np.abs(w_closed - w_num)))
    rep.errors["transport_isometry"] = float(np.max(np.abs(
        geo.norm(man, t, q_closed, w_num) - geo.norm(man, t, p, w))))

    G_closed = geo.christoffel(man, t, p, method="closed")
    G_num = geo.christoffel(man, t, p, method="numeric")
    rep.errors["christoffel"] = float(np.max(np.abs(G_closed - G_num)))

    R_closed = geo.ricci_tensor(man, t, p, method="closed")
    R_num = geo.ricci_tensor(man, t, p, method="numeric")
    rep.errors["ricci"] = float(np.max(np.abs(R_closed - R_num)))
    return rep


def metric_bound_violations(man: TimeDependentManifold, kappa: float, pts: Point, times, slack: float = 1e-9) -> int:
    """Count (s, t, x) probes where e^{-2k|t-s|} g(s) <= g(t) <= e^{2k|t-s|} g(s) fails."""
    times = [float(t) for t in times]
    gs = {t: geo.metric_at(man, t, pts).g for t in times}
    bad = 0
    for s, t in itertools.combinations(times, 2):
        L = np.linalg.cholesky(gs[s])
        Linv = np.linalg.inv(L)
        rel = Linv @ gs[t] @ np.swapaxes(Linv, -1, -2)
        eig = np.linalg.eigvalsh(0.5 * (rel + np.swapaxes(rel, -1, -2)))
        lo, hi = np.exp(-2 * kappa * abs(t - s)), np.exp(2 * kappa * abs(t - s))
        bad += int(np.sum((eig.min(axis=-1) < lo * (1 - slack)) | (eig.max(axis=-1) > hi * (1 + slack))))
    return bad
