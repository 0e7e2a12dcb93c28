"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (shown in the "acceptance criteria"
section of the pytest summary) before asserting.  Seeds are fixed.
"""
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ricci_couple import cli, geometry as geo, models, walk
from ricci_couple.checks import TOLERANCES, geometry_probes, metric_bound_violations
from ricci_couple.comparison import (
    RadialDriftSpec,
    chi,
    exceedance_fraction,
    jacobi_G,
    non_explosion_test,
    radial_rho_cosimulate,
)
from ricci_couple.geometry import Point
from ricci_couple.harness import (
    ExperimentConfig,
    run_contraction_experiment,
    run_gradient_experiment,
    run_invariance_experiment,
    run_marginal_experiment,
    run_tail_experiment,
)

pytestmark = pytest.mark.slow

WORKERS = os.cpu_count() or 1
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def experiment(path: str) -> ExperimentConfig:
    raw = json.loads((CONFIGS / path).read_text())
    sec = raw.get("couple") or raw["gradient"]
    sec = {k: v for k, v in sec.items() if k not in ("experiments", "direct")}
    return ExperimentConfig(model=raw["model"], seed=raw["seed"], **sec)


def test_criterion_01_flat_equality():
    cfg = experiment("flat_equality.json").model_copy(update={"report_times": [1.0]})
    rep = run_tail_experiment(cfg, workers=WORKERS)
    row = rep.rows[0]
    target = chi(0.5)
    slack = row.halfwidth + 0.02
    ok = abs(row.tail - target) <= slack
    record(1, "flat equality tail", ok,
           f"P[tau*>1] = {row.tail:.4f}, target {target:.5f} +- {slack:.4f} (delta {rep.diagnostics[0]['delta_couple']:.3g})")


def test_criterion_02_sphere_bound():
    cfg = experiment("sphere_tail.json")
    rep = run_tail_experiment(cfg, workers=WORKERS)
    ok = len(rep.rows) == 3 and all(r.tail <= r.bound + 3 * r.halfwidth for r in rep.rows)
    detail = ", ".join(f"T={r.T:g}: {r.tail:.4f} vs {r.bound:.4f}" for r in rep.rows)
    record(2, "sphere tail below bound", ok, detail)


def test_criterion_03_gradient_equality():
    cfg = experiment("gradient_sign_1d.json").model_copy(update={"probe_spacings": [0.05]})
    rep = run_gradient_experiment(cfg, workers=WORKERS, direct=False)
    row = rep.rows[0]
    target = 2 / math.sqrt(2 * math.pi)
    ok = row.bound == target and abs(row.quotient - target) <= 3 * row.err
    record(3, "gradient equality probe", ok,
           f"quotient {row.quotient:.4f} +- {row.err:.4f} vs {target:.5f}; bound {row.bound:.5f}")


def test_criterion_04_parallel_contraction():
    flat = ExperimentConfig(model={"kind": "euclidean", "dim": 2}, alphas=[0.04, 0.02], trials=2000, seed=4,
                            separation=1.0)
    f = run_contraction_experiment(flat, workers=WORKERS)
    sph = experiment("sphere_contraction.json")
    s = run_contraction_experiment(sph, workers=WORKERS)
    ratio = s.ratios[0]
    flat_ok = f.step_max == [0.0, 0.0] and f.path_p99 == [0.0, 0.0]
    ok = flat_ok and 1.5 <= ratio <= 3.0
    record(4, "parallel contraction", ok,
           f"flat max increase {max(f.step_max):g}; sphere p99 {s.step_p99[0]:.3e} -> {s.step_p99[1]:.3e}, "
           f"ratio {ratio:.3f} (band [1.5, 3])")


def test_criterion_05_invariance():
    cfg = ExperimentConfig(model={"kind": "euclidean", "dim": 2}, alphas=[0.2, 0.05], trials=10_000, seed=5)
    rep = run_invariance_experiment(cfg, workers=WORKERS)
    coarse, fine = rep.worst
    ok = fine < 0.02 and fine < coarse
    record(5, "invariance principle", ok, f"max KS {coarse:.4f} at alpha 0.2, {fine:.4f} at alpha 0.05")


@pytest.mark.parametrize("model", [
    {"kind": "euclidean", "dim": 2},
    {"kind": "sphere_backward_ricci", "dim": 2, "parameters": {"c0": 1.0}},
])
def test_criterion_06_marginals(model):
    cfg = ExperimentConfig(model=model, alphas=[0.05], trials=10_000, seed=6, separation=1.0)
    rep = run_marginal_experiment(cfg, workers=WORKERS)
    ok = rep.worst < 0.02
    record(6, f"marginal laws on {model['kind']}", ok,
           f"max KS {rep.worst:.4f} (X1 {max(rep.ks1):.4f}, X2 {max(rep.ks2):.4f}) vs {rep.reference_trials} walks")


def test_criterion_07_geometry_oracles():
    worst = {}
    ok = True
    for kind, params in [("euclidean", {}), ("sphere_backward_ricci", {"c0": 1.0}),
                         ("sphere_static", {"c0": 2.0}), ("hyperbolic_scaled", {"c0": 2.0})]:
        for dim in (2, 3):
            man = models.build(models.ModelSpec(kind=kind, dim=dim, horizon=(0.0, 0.3), parameters=params))
            rep = geometry_probes(man, 100, seed=7)
            ok &= rep.passed
            for key, err in rep.errors.items():
                worst[key] = max(worst.get(key, 0.0), err)
    # Jacobi scalar: u, r sin(u / r), sinh(u)
    jac_err = 0.0
    r = 2.0
    for kind, params, ref in [("euclidean", {}, lambda u: u),
                              ("sphere_static", {"c0": r * r}, lambda u: r * np.sin(u / r)),
                              ("hyperbolic_scaled", {"c0": 1.0}, np.sinh)]:
        man = models.build(models.ModelSpec(kind=kind, dim=3, horizon=(0.0, 0.3), parameters=params))
        g = geo.minimal_geodesic(man, 0.0, Point([0.0, 0.0, 0.0]), Point([0.3, -0.2, 0.1]))
        tab = jacobi_G(man, 0.0, g)
        jac_err = max(jac_err, float(np.max(np.abs(tab.G - ref(tab.u)))))
    ok &= jac_err <= 1e-6
    detail = ", ".join(f"{k} {worst[k]:.1e}/{TOLERANCES[k]:.0e}" for k in TOLERANCES) + f", jacobi {jac_err:.1e}/1e-06"
    record(7, "geometry oracle suite", ok, detail)


def test_criterion_08_kappa():
    man = models.build(models.ModelSpec(kind="chart_generic", dim=2, metric="generic_metrics:exp_growth"))
    pts = man.extras["sampler"](np.random.default_rng(8), 64)
    times = np.linspace(man.T1, man.T2, 6)
    kappa = geo.kappa_estimate(man, pts, times)
    bad = metric_bound_violations(man, kappa, pts, times)
    ok = abs(kappa - 0.7) <= 1e-6 and bad == 0
    record(8, "kappa certification", ok, f"kappa {kappa:.9f} (target 0.7), {bad} bound violations")


def test_criterion_09_non_explosion():
    cases = [("b=0, C=0", None, 0.0, "non_explosive"), ("b=0, C=1", None, 1.0, "non_explosive"),
             ("b=3s^2", lambda s: 3 * np.asarray(s) ** 2, 0.0, "explosive")]
    parts, ok = [], True
    for name, b, C, want in cases:
        res = non_explosion_test(b, C)
        good = res.verdict == want and res.verdicts[-2] == want and res.stable
        ok &= good
        parts.append(f"{name}: {res.verdict}{'' if res.stable else ' (unstable)'}")
    record(9, "non-explosion verdicts", ok, "; ".join(parts))


def test_criterion_10_radial_domination():
    man = models.build(models.ModelSpec(kind="euclidean", dim=2))
    spec = RadialDriftSpec(C0=1.0, r0=0.1)
    fractions, floors = [], 0
    for alpha in (0.05, 0.02):
        rngs = [walk.trial_rng(10, i, tag=int(alpha * 1000)) for i in range(1000)]
        path = walk.run_walks(man, [0.5, 0.0], alpha, rngs)
        rho = radial_rho_cosimulate(path, man, spec)
        d = geo.distance(man, 0.0, Point(np.zeros_like(path.points.coords)), path.points)
        fractions.append(exceedance_fraction(d, rho, margin=0.1))
        floors += rho.floor_violations()
    ok = fractions[1] < 0.01 and fractions[1] <= fractions[0]
    record(10, "radial comparison domination", ok,
           f"exceedance {fractions[0]:.4f} at alpha 0.05, {fractions[1]:.4f} at alpha 0.02 ({floors} floor hits)")


def test_criterion_11_determinism(tmp_path):
    cfg = {
        "seed": 11,
        "model": {"kind": "sphere_backward_ricci", "dim": 2, "horizon": [0.0, 1.0], "parameters": {"c0": 1.0}},
        "couple": {"experiments": ["tail", "contraction"], "alphas": [0.1, 0.05], "trials": 600,
                   "separation": 1.0, "report_times": [0.5, 1.0], "chunk_size": 150},
        "gradient": {"alphas": [0.1], "trials": 600, "observable": {"name": "hemisphere", "axis": 0},
                     "probe_spacings": [0.2], "chunk_size": 150},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    bodies = {}
    for workers in (1, 2, 4):
        out = tmp_path / f"w{workers}"
        for cmd in ("couple", "gradient"):
            cli.main([cmd, "--config", str(path), "--out", str(out), "--workers", str(workers)])
        bodies[workers] = {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}
    names = sorted(bodies[1])
    ok = len(names) == 3 and bodies[1] == bodies[2] == bodies[4]
    record(11, "determinism across worker counts", ok, f"{len(names)} CSVs compared at 1, 2 and 4 workers")
