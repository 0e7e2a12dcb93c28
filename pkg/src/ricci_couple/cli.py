"""Command-line entry point: ``ricci-couple {geometry-check,couple,gradient,explosion}``.

Exit codes: 0 all checks passed, 1 a check failed or was inconclusive,
2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from . import geometry as geo
from .checks import geometry_probes, metric_bound_violations
from .comparison import DEFAULT_LADDER, NumericError, non_explosion_test
from .harness import (
    CouplingSection,
    ExperimentConfig,
    ObservableSpec,
    SimulationError,
    run_contraction_experiment,
    run_gradient_experiment,
    run_tail_experiment,
)
from .models import InvalidSpec, ModelSpec, build, verify_condition

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(Exception):
    pass


# ------------------------------------------------------------ schema


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NumericsSection(_Section):
    dt_fd: Optional[float] = Field(default=None, gt=0)
    dx_fd: float = Field(default=1e-3, gt=0)
    rk4_step: float = Field(default=1e-2, gt=0)
    transport_step: float = Field(default=1e-3, gt=0)
    shoot_tol: float = Field(default=1e-11, gt=0)
    shoot_max_iter: int = Field(default=60, ge=1)
    point_tol: float = Field(default=1e-9, gt=0)

    def to_numerics(self) -> geo.NumericsConfig:
        return geo.NumericsConfig(**self.model_dump())


class CoupleSection(_Section):
    experiments: list[Literal["tail", "contraction"]] = Field(default_factory=lambda: ["tail"], min_length=1)
    alphas: list[float]
    trials: int = Field(ge=100)
    coupling: CouplingSection = Field(default_factory=CouplingSection)
    report_times: list[float] = Field(default_factory=list)
    k: float = 0.0
    x1: Optional[list[float]] = None
    x2: Optional[list[float]] = None
    separation: Optional[float] = None
    chunk_size: int = Field(default=2500, ge=1)


class GradientSection(_Section):
    alphas: list[float]
    trials: int = Field(ge=100)
    observable: ObservableSpec
    probe_spacings: list[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05])
    probe_center: Optional[list[float]] = None
    coupling: CouplingSection = Field(default_factory=CouplingSection)
    k: float = 0.0
    direct: bool = True
    chunk_size: int = Field(default=2500, ge=1)


class GeometryCheckSection(_Section):
    k: Optional[float] = None  # curvature-condition constant to verify; None skips the check
    condition_samples: int = Field(default=64, ge=1)
    probes: int = Field(default=100, ge=1)
    kappa_points: int = Field(default=64, ge=1)
    kappa_times: int = Field(default=5, ge=2)


class ExplosionCase(_Section):
    name: str
    b: list[float] = Field(default_factory=list, description="polynomial coefficients of b(s), lowest first")
    C: float = 0.0
    ladder: list[float] = Field(default_factory=lambda: list(DEFAULT_LADDER))


class ExplosionSection(_Section):
    cases: list[ExplosionCase] = Field(min_length=1)
    slope_threshold: float = Field(default=0.5, gt=0)
    tolerance: float = Field(default=1e-6, gt=0)
    decisive: bool = False


class RunConfig(_Section):
    seed: int = Field(default=0, ge=0)
    model: Optional[ModelSpec] = None
    numerics: NumericsSection = Field(default_factory=NumericsSection)
    couple: Optional[CoupleSection] = None
    gradient: Optional[GradientSection] = None
    geometry_check: Optional[GeometryCheckSection] = None
    explosion: Optional[ExplosionSection] = None

    @field_validator("seed")
    @classmethod
    def _u64(cls, v):
        if v >= 2**64:
            raise ValueError("seed must fit in 64 bits")
        return v


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def load_config(path: Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {_format_validation(exc)}") from exc


def config_hash(cfg: RunConfig) -> str:
    normal = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(normal.encode()).hexdigest()


# ------------------------------------------------------------ outputs


def fmt(x) -> str:
    """Deterministic text form of a CSV cell."""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.10g}"


def write_csv(path: Path, columns: list[tuple[str, str]], rows: list[list], cfg_hash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash: {cfg_hash}\n")
    for name, doc in columns:
        buf.write(f"# {name}: {doc}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([c[0] for c in columns])
    for r in rows:
        w.writerow([fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if not math.isfinite(v) else v
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


class Manifest:
    """manifest.json, written when a run starts and finalised when it ends."""

    def __init__(self, out: Path, command: str, cfg: RunConfig, cfg_hash: str):
        self.path = out / "manifest.json"
        self.data = {
            "command": command, "config_hash": cfg_hash, "tool_version": __version__,
            "master_seed": cfg.seed, "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished_at": None, "status": "running", "outputs": {},
        }
        write_json(self.path, self.data)

    def add(self, key: str, path: Path) -> None:
        self.data["outputs"][key] = str(path)

    def finish(self, code: int) -> None:
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["status"] = "ok" if code == EXIT_OK else "failed"
        self.data["exit_code"] = code
        write_json(self.path, self.data)


# ------------------------------------------------------------ commands


def _need(cfg: RunConfig, section: str):
    value = getattr(cfg, section)
    if value is None:
        raise ConfigError(f"config has no '{section}' section")
    if section != "explosion" and cfg.model is None:
        raise ConfigError("config has no 'model' section")
    return value


def _experiment(cfg: RunConfig, sec, **extra) -> ExperimentConfig:
    fields = sec.model_dump(exclude={"experiments", "direct"})
    try:
        return ExperimentConfig(model=cfg.model, seed=cfg.seed, numerics=cfg.numerics.model_dump(), **fields, **extra)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from exc


def cmd_geometry_check(cfg: RunConfig, out: Path, args, manifest: Manifest, h: str) -> int:
    sec = _need(cfg, "geometry_check")
    man = build(cfg.model, cfg.numerics.to_numerics())
    report: dict = {"config_hash": h, "model": cfg.model.kind}
    ok = True
    if man.closed is not None:
        probes = geometry_probes(man, sec.probes, cfg.seed)
        report["probes"] = probes.to_dict()
        ok &= probes.passed
    if sec.k is not None:
        cond = verify_condition(man, sec.k, sec.condition_samples, cfg.seed)
        passed = cond.holds(1e-6)
        report["condition"] = {"k": sec.k, "max_violation": cond.max_violation, "passed": passed,
                               "witnesses": cond.witnesses}
        ok &= passed
    rng = np.random.default_rng(cfg.seed)
    pts = man.extras["sampler"](rng, sec.kappa_points)
    times = np.linspace(man.T1, man.T2, sec.kappa_times)
    kappa = geo.kappa_estimate(man, pts, times)
    bad = metric_bound_violations(man, kappa, pts, times)
    report["kappa"] = {"estimate": kappa, "bound_violations": bad}
    ok &= bad == 0
    report["passed"] = bool(ok)
    path = out / "geometry_check.json"
    write_json(path, report)
    manifest.add("geometry_check", path)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_couple(cfg: RunConfig, out: Path, args, manifest: Manifest, h: str) -> int:
    sec = _need(cfg, "couple")
    exp = _experiment(cfg, sec)
    ok = True
    report: dict = {"config_hash": h}
    if "tail" in sec.experiments:
        tail = run_tail_experiment(exp, workers=args.workers)
        report["tail"] = tail.to_dict()
        ok &= tail.passed
        path = out / "couple_tail.csv"
        write_csv(path, [
            ("alpha", "walk scale"), ("T", "report time"), ("tail", "empirical P[tau* > T]"),
            ("ci_lo", "Wilson 95% lower end"), ("ci_hi", "Wilson 95% upper end"),
            ("bound", "chi(a / 2 sqrt(beta(T - T1)))"), ("passed", "tail <= bound + 3 halfwidth"),
        ], [[r.alpha, r.T, r.tail, r.ci_lo, r.ci_hi, r.bound, r.passed] for r in tail.rows], h)
        manifest.add("couple_tail_csv", path)
    if "contraction" in sec.experiments:
        con = run_contraction_experiment(exp, workers=args.workers)
        report["contraction"] = con.to_dict()
        ok &= con.passed
        path = out / "couple_contraction.csv"
        write_csv(path, [
            ("alpha", "walk scale"),
            ("step_p99", "99th percentile over trials of max per-step increase of e^{k(t-T1)/2} d"),
            ("path_p99", "99th percentile of the path-level max increase"),
            ("step_max", "largest per-step increase over all trials"), ("C", "step_p99 / alpha"),
        ], [[a, s, p, mx, c] for a, s, p, mx, c in zip(con.alphas, con.step_p99, con.path_p99, con.step_max,
                                                        con.constants)], h)
        manifest.add("couple_contraction_csv", path)
    report["passed"] = bool(ok)
    path = out / "couple_report.json"
    write_json(path, report)
    manifest.add("couple_report", path)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradient(cfg: RunConfig, out: Path, args, manifest: Manifest, h: str) -> int:
    sec = _need(cfg, "gradient")
    exp = _experiment(cfg, sec)
    rep = run_gradient_experiment(exp, workers=args.workers, direct=sec.direct)
    path = out / "gradient.csv"
    write_csv(path, [
        ("alpha", "walk scale"), ("h", "requested probe spacing"), ("distance", "d_{g(T1)}(x, y)"),
        ("quotient", "coupled-estimator |P_t f(x) - P_t f(y)| / d"), ("err", "its MC standard error"),
        ("direct", "two-point single-walk estimate of the same quotient"), ("direct_err", "its MC standard error"),
        ("bound", "osc(f) / sqrt(2 pi beta(t - T1))"), ("passed", "quotient <= bound + 3 err"),
    ], [[r.alpha, r.h, r.distance, r.quotient, r.err, r.direct, r.direct_err, r.bound, r.passed]
        for r in rep.rows], h)
    manifest.add("gradient_csv", path)
    jpath = out / "gradient_report.json"
    write_json(jpath, {"config_hash": h, **rep.to_dict()})
    manifest.add("gradient_report", jpath)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_explosion(cfg: RunConfig, out: Path, args, manifest: Manifest, h: str) -> int:
    sec = _need(cfg, "explosion")
    results, rows = [], []
    decisive = sec.decisive or args.strict
    any_inconclusive = False
    for case in sec.cases:
        poly = np.polynomial.Polynomial(case.b or [0.0])
        grid = np.linspace(0.0, max(case.ladder), 4097)
        if np.any(poly(grid) < 0):
            raise ConfigError(f"explosion.cases[{case.name}]: b must be nonnegative")
        try:
            res = non_explosion_test(poly, case.C, case.ladder, sec.slope_threshold, sec.tolerance)
        except ValueError as exc:
            raise ConfigError(f"explosion.cases[{case.name}]: {exc}") from exc
        any_inconclusive |= res.verdict == "inconclusive"
        results.append({"name": case.name, "verdict": res.verdict, "stable": res.stable,
                        "ladder": res.ladder, "partials": res.partials, "slopes": res.slopes,
                        "increments": res.increments, "verdicts": res.verdicts})
        for y, p in zip(res.ladder, res.partials):
            rows.append([case.name, y, p, res.verdict])
    path = out / "explosion.csv"
    write_csv(path, [("case", "case name"), ("Y", "truncation rung"),
                     ("partial", "double integral truncated at Y"), ("verdict", "verdict of the case")], rows, h)
    manifest.add("explosion_csv", path)
    jpath = out / "explosion_report.json"
    write_json(jpath, {"config_hash": h, "decisive": decisive, "cases": results})
    manifest.add("explosion_report", jpath)
    return EXIT_FAIL if (decisive and any_inconclusive) else EXIT_OK


COMMANDS = {
    "geometry-check": cmd_geometry_check,
    "couple": cmd_couple,
    "gradient": cmd_gradient,
    "explosion": cmd_explosion,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ricci-couple", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, default=None, help="output directory (default $RICCI_COUPLE_OUT or ./out)")
        p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes")
        p.add_argument("--strict", action="store_true", help="inconclusive verdicts count as failures")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or Path(os.environ.get("RICCI_COUPLE_OUT", "out"))
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.model_copy(update={"seed": args.seed})
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    h = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, args.command, cfg, h)
    try:
        code = COMMANDS[args.command](cfg, out, args, manifest, h)
    except (ConfigError, InvalidSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (SimulationError, geo.GeometryError, NumericError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - anything else is still a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    manifest.finish(code)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
