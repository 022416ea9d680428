"""Command-line front end: ``magcal simulate|calibrate|evaluate|benchmark``.

Every command prints a JSON document on stdout. Exit status is 0 on success,
1 on a solver failure (payload still printed) and 2 on usage or input errors.

Environment overrides: ``MAGCAL_OUT_DIR`` (default output directory) and
``MAGCAL_THREADS`` (benchmark worker processes).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from magcal import io as mio
from magcal.metrics import EvaluationReport, ellipsoid_calibration, evaluate
from magcal.model import CalibrationDivergence, build_windows
from magcal.simulate import TruthParams, generate, preset
from magcal.solver import (
    IncrementalEstimator,
    SolverConfig,
    detect_convergence,
    final_estimate,
    solve_batch,
)

log = logging.getLogger("magcal")

METHODS = ("bfg", "ifg", "ellipsoid")
PRESETS = ("wam", "mam", "lam")
BENCHMARK_METRICS = (
    "heading_rmse",
    "field_magnitude_std",
    "soft_iron_geodesic_error",
    "hard_iron_error",
    "gyro_bias_error",
)


@dataclass
class RunConfig:
    command: str
    inputs: list[Path] = field(default_factory=list)
    methods: list[str] = field(default_factory=lambda: ["bfg"])
    presets: list[str] = field(default_factory=lambda: ["wam"])
    seed: int = 0
    runs: int = 1
    theta: int | None = None
    aggregator: str = "median"
    derivative: str = "central"
    rel_tol: float = 1e-7
    abs_tol: float = 1e-7
    noise_variance: float = 1e-6
    truth: Path | None = None
    calib: Path | None = None
    out: Path | None = None
    threads: int = 1

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            noise_covariance=np.eye(3) * self.noise_variance, rel_tol=self.rel_tol, abs_tol=self.abs_tol
        )


def default_theta(t: np.ndarray) -> int:
    """Window length matching one second of data, from the median sample spacing."""
    dt = float(np.median(np.diff(t)))
    return max(2, int(round(1.0 / dt)))


def calibrate_arrays(method: str, arrays, cfg: RunConfig, theta: int | None = None):
    """Run one calibration method on ``(t, mag, gyro)`` arrays."""
    t, mag, _ = arrays
    if method == "ellipsoid":
        return ellipsoid_calibration(mag)
    theta = theta or cfg.theta or default_theta(t)
    windows = build_windows(arrays, theta, cfg.aggregator, cfg.derivative)
    scfg = cfg.solver_config()
    if method == "bfg":
        return solve_batch(windows, scfg)
    if method == "ifg":
        est = IncrementalEstimator(scfg).extend(windows)
        result = final_estimate(est)
        conv = detect_convergence(est.history)
        result.diagnostics["convergence_index"] = conv
        return result
    raise ValueError(f"unknown method {method!r}")


def _report_dict(report: EvaluationReport) -> dict:
    return {"schema": mio.REPORT_SCHEMA, **report.to_dict()}


def run_simulate(cfg: RunConfig) -> dict:
    spec = preset(cfg.presets[0], seed=cfg.seed)
    ds = generate(spec)
    out = cfg.out or Path(f"{spec.name}_{cfg.seed}.csv")
    mio.write_dataset(ds, out)
    sidecar = mio.truth_sidecar(out)
    mio.write_truth(sidecar, spec.truth)
    return {"dataset": str(out), "truth": str(sidecar), "samples": len(ds.samples), "preset": spec.name,
            "seed": cfg.seed}


def _load_truth(cfg: RunConfig, data_path: Path) -> TruthParams | None:
    if cfg.truth is not None:
        return mio.read_truth(cfg.truth)
    sidecar = mio.truth_sidecar(data_path)
    return mio.read_truth(sidecar) if sidecar.exists() else None


def run_calibrate(cfg: RunConfig) -> dict:
    path = cfg.inputs[0]
    data = mio.read_dataset(path)
    method = cfg.methods[0]
    result = calibrate_arrays(method, data.arrays(), cfg)
    out_dir = cfg.out or Path(os.environ.get("MAGCAL_OUT_DIR", "."))
    calib_path = out_dir / f"{path.stem}.{method}.calibration.json"
    extra = {}
    if "convergence_index" in result.diagnostics:
        extra["convergence_index"] = result.diagnostics["convergence_index"]
    mio.write_json(calib_path, mio.calibration_to_dict(result, extra))
    log.debug("wrote %s", calib_path)
    payload = {"calibration": str(calib_path), "converged": bool(result.converged)}
    truth = _load_truth(cfg, path)
    if truth is not None or data.attitude is not None:
        report = evaluate(result, data.mag, data.attitude, truth, method, path.stem)
        report_path = out_dir / f"{path.stem}.{method}.report.json"
        mio.write_json(report_path, _report_dict(report))
        payload["report"] = str(report_path)
        payload["metrics"] = report.to_dict()
    return payload


def run_evaluate(cfg: RunConfig) -> dict:
    path = cfg.inputs[0]
    data = mio.read_dataset(path)
    result = None
    name = "raw"
    if cfg.calib is not None:
        result = mio.calibration_from_dict(mio.read_json(cfg.calib))
        name = result.method
    report = evaluate(result, data.mag, data.attitude, _load_truth(cfg, path), name, path.stem)
    return _report_dict(report)


def _benchmark_job(args) -> list[dict]:
    method, preset_name, seed, cfg = args
    ev = generate(preset("wam", seed=seed + 1_000_000))
    ds = generate(preset(preset_name, seed=seed))
    rows = []
    try:
        result = calibrate_arrays(method, ds.arrays(), cfg, theta=cfg.theta or int(round(ds.spec.rate)))
        report = evaluate(result, ev.mag, ev.truth_attitude, ds.spec.truth, method, preset_name)
        row = report.to_dict()
        row["error"] = None
    except (CalibrationDivergence, ValueError, np.linalg.LinAlgError) as exc:
        row = EvaluationReport(method, preset_name, converged=False).to_dict()
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["seed"] = seed
    raw = evaluate(None, ev.mag, ev.truth_attitude, method_name="raw", dataset_name=preset_name)
    row["raw_heading_rmse"] = raw.heading_rmse
    row["raw_field_magnitude_std"] = raw.field_magnitude_std
    rows.append(row)
    return rows


def benchmark_rows(cfg: RunConfig) -> list[dict]:
    jobs = [
        (m, p, cfg.seed + k, cfg)
        for m in cfg.methods
        for p in cfg.presets
        for k in range(cfg.runs)
    ]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            chunks = list(pool.map(_benchmark_job, jobs))
    else:
        chunks = [_benchmark_job(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


def aggregate_rows(rows: list[dict]) -> list[dict]:
    groups: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["method_name"], row["dataset_name"]), []).append(row)
    out = []
    for (method, dataset), grp in groups.items():
        ok = [r for r in grp if r["converged"]]
        agg = {
            "method_name": method,
            "dataset_name": dataset,
            "runs": len(grp),
            "failure_rate": 1.0 - len(ok) / len(grp),
        }
        for key in BENCHMARK_METRICS + ("raw_heading_rmse", "raw_field_magnitude_std"):
            vals = [r[key] for r in ok if r.get(key) is not None]
            agg[f"mean_{key}"] = float(np.mean(vals)) if vals else None
        out.append(agg)
    return out


def tidy_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "preset", "seed", "metric", "value"])
    for row in rows:
        for key in BENCHMARK_METRICS:
            if row.get(key) is not None:
                writer.writerow([row["method_name"], row["dataset_name"], row["seed"], key, repr(row[key])])
    return buf.getvalue()


def run_benchmark(cfg: RunConfig) -> dict:
    rows = benchmark_rows(cfg)
    summary = aggregate_rows(rows)
    payload = {"schema": "magcal.benchmark/1", "runs": rows, "aggregate": summary}
    out_dir = cfg.out or Path(os.environ.get("MAGCAL_OUT_DIR", "."))
    mio.write_json(out_dir / "benchmark.json", payload)
    mio.atomic_write_text(out_dir / "benchmark_tidy.csv", tidy_csv(rows))
    return {"benchmark": str(out_dir / "benchmark.json"), "tidy": str(out_dir / "benchmark_tidy.csv"),
            "aggregate": summary}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magcal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a preset dataset CSV plus truth sidecar")
    p.add_argument("--preset", choices=PRESETS, default="wam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    def solver_opts(q):
        q.add_argument("--theta", type=int, default=None, help="samples per factor window (default: 1 s)")
        q.add_argument("--aggregator", choices=("median", "mean"), default="median")
        q.add_argument("--derivative", choices=("central", "slope"), default="central")
        q.add_argument("--rel-tol", type=float, default=1e-7)
        q.add_argument("--abs-tol", type=float, default=1e-7)
        q.add_argument("--noise-variance", type=float, default=1e-6)

    p = sub.add_parser("calibrate", help="estimate a calibration from a dataset CSV")
    p.add_argument("--method", choices=METHODS, default="bfg")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--truth", type=Path, default=None)
    solver_opts(p)

    p = sub.add_parser("evaluate", help="score a calibration file (or raw data) on a dataset")
    p.add_argument("--calib", type=Path, default=None)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--truth", type=Path, default=None)

    p = sub.add_parser("benchmark", help="Monte Carlo comparison across methods and presets")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--presets", nargs="+", choices=PRESETS, default=list(PRESETS))
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--threads", type=int, default=None)
    solver_opts(p)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if args.command == "simulate":
        cfg.presets = [args.preset]
        cfg.seed = args.seed
        cfg.out = args.out
        return cfg
    if hasattr(args, "inp"):
        if not args.inp.exists():
            raise FileNotFoundError(f"input dataset {args.inp} does not exist")
        cfg.inputs = [args.inp]
    if getattr(args, "truth", None) is not None:
        cfg.truth = args.truth
    if args.command == "calibrate":
        cfg.methods = [args.method]
    if args.command == "evaluate":
        cfg.calib = args.calib
    if args.command == "benchmark":
        cfg.methods = args.methods
        cfg.presets = args.presets
        cfg.runs = args.runs
        cfg.seed = args.seed
        cfg.threads = args.threads or int(os.environ.get("MAGCAL_THREADS", "1"))
        if cfg.runs < 1:
            raise ValueError("--runs must be at least 1")
    if hasattr(args, "theta"):
        if args.theta is not None and args.theta < 2:
            raise ValueError("--theta must be at least 2")
        cfg.theta = args.theta
        cfg.aggregator = args.aggregator
        cfg.derivative = args.derivative
        cfg.rel_tol = args.rel_tol
        cfg.abs_tol = args.abs_tol
        cfg.noise_variance = args.noise_variance
    cfg.out = getattr(args, "out", None)
    return cfg


COMMANDS = {
    "simulate": run_simulate,
    "calibrate": run_calibrate,
    "evaluate": run_evaluate,
    "benchmark": run_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = config_from_args(args)
        payload = COMMANDS[cfg.command](cfg)
        status = 0 if payload.get("converged", True) else 1
    except CalibrationDivergence as exc:
        payload = {"error": "divergence", "detail": str(exc)}
        status = 1
    except (OSError, ValueError) as exc:
        payload = {"error": type(exc).__name__, "detail": str(exc)}
        status = 2
    json.dump(payload, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
