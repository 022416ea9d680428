"""CSV time-series and JSON calibration/report formats.

Dataset CSV (version 1)::

    t,mx,my,mz,wx,wy,wz[,roll,pitch,heading]

seconds, milligauss, rad/s and (optional truth attitude) degrees. Floats are
written with ``repr`` so a read/write cycle is bit exact.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from magcal.model import CalibrationResult, SensorSample
from magcal.simulate import SimulatedDataset, TruthParams

CSV_HEADER = ("t", "mx", "my", "mz", "wx", "wy", "wz")
TRUTH_COLUMNS = ("roll", "pitch", "heading")
CALIBRATION_SCHEMA = "magcal.calibration/1"
REPORT_SCHEMA = "magcal.report/1"
TRUTH_SCHEMA = "magcal.truth/1"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    samples: list[SensorSample]
    attitude_deg: np.ndarray | None = None  # (N, 3) roll, pitch, heading

    @property
    def attitude(self) -> np.ndarray | None:
        return None if self.attitude_deg is None else np.radians(self.attitude_deg)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = np.array([s.t for s in self.samples])
        mag = np.array([s.mag for s in self.samples]).reshape(-1, 3)
        gyro = np.array([s.gyro for s in self.samples]).reshape(-1, 3)
        return t, mag, gyro

    @property
    def mag(self) -> np.ndarray:
        return self.arrays()[1]


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_csv(samples, attitude_deg=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(CSV_HEADER) + (list(TRUTH_COLUMNS) if attitude_deg is not None else [])
    writer.writerow(header)
    for i, s in enumerate(samples):
        row = [_fmt(s.t), *map(_fmt, s.mag), *map(_fmt, s.gyro)]
        if attitude_deg is not None:
            row += [_fmt(a) for a in attitude_deg[i]]
        writer.writerow(row)
    return buf.getvalue()


def write_dataset(dataset, path) -> None:
    """Write a simulated (with truth attitude) or loaded dataset as CSV."""
    if isinstance(dataset, SimulatedDataset):
        att = np.degrees(dataset.truth_attitude)
        text = dataset_to_csv(dataset.samples, att)
    else:
        text = dataset_to_csv(dataset.samples, dataset.attitude_deg)
    atomic_write_text(path, text)


def read_dataset(path) -> Dataset:
    """Parse and validate a dataset CSV; errors name the offending line."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise DatasetFormatError(f"{path}: missing required columns {missing}")
        has_truth = all(c in header for c in TRUTH_COLUMNS)
        idx = [header.index(c) for c in CSV_HEADER]
        tidx = [header.index(c) for c in TRUTH_COLUMNS] if has_truth else []
        samples = []
        attitude = []
        prev_t = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(row[i]) for i in idx]
                att = [float(row[i]) for i in tidx]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed number ({exc})") from None
            if not all(math.isfinite(v) for v in vals + att):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite value")
            if vals[0] <= prev_t:
                raise DatasetFormatError(
                    f"{path}:{lineno}: timestamp {vals[0]!r} is not after the previous one ({prev_t!r})"
                )
            prev_t = vals[0]
            samples.append(SensorSample(vals[0], vals[1:4], vals[4:7]))
            if has_truth:
                attitude.append(att)
    if not samples:
        raise DatasetFormatError(f"{path}: no data rows")
    return Dataset(samples, np.array(attitude, dtype=float) if has_truth else None)


def _floats(a) -> list:
    return None if a is None else np.asarray(a, dtype=float).tolist()


def calibration_to_dict(result: CalibrationResult, extra: dict | None = None) -> dict:
    diag = {
        "final_cost": result.final_cost if math.isfinite(result.final_cost) else None,
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
    }
    for key in ("condition_number", "rank_deficient", "unobservable", "convergence_index", "tail_entries"):
        if key in result.diagnostics:
            val = result.diagnostics[key]
            if isinstance(val, float) and not math.isfinite(val):
                val = None
            diag[key] = val
    if extra:
        diag.update(extra)
    return {
        "schema": CALIBRATION_SCHEMA,
        "method": result.method,
        "soft_iron": _floats(result.soft_iron),
        "inverse_soft_iron": _floats(result.inverse_soft_iron),
        "hard_iron": _floats(result.hard_iron),
        "pseudo_hard_iron": _floats(result.pseudo_hard_iron),
        "gyro_bias": _floats(result.gyro_bias),
        "diagnostics": diag,
    }


def calibration_from_dict(d: dict) -> CalibrationResult:
    if d.get("schema") != CALIBRATION_SCHEMA:
        raise DatasetFormatError(f"unsupported calibration schema {d.get('schema')!r}")
    diag = d.get("diagnostics", {})
    res = CalibrationResult.from_soft_iron(
        d["soft_iron"], d["hard_iron"], d.get("gyro_bias"),
        method=d.get("method", "unknown"),
        converged=bool(diag.get("converged", True)),
        iterations=int(diag.get("iterations", 0)),
        final_cost=float("nan") if diag.get("final_cost") is None else diag["final_cost"],
        diagnostics=diag,
    )
    res.pseudo_hard_iron = np.asarray(d["pseudo_hard_iron"], dtype=float)
    return res


def write_json(path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_truth(path, truth: TruthParams) -> None:
    write_json(path, {"schema": TRUTH_SCHEMA, **truth.to_dict()})


def read_truth(path) -> TruthParams:
    d = read_json(path)
    if d.get("schema", TRUTH_SCHEMA) != TRUTH_SCHEMA:
        raise DatasetFormatError(f"unsupported truth schema {d.get('schema')!r}")
    return TruthParams.from_dict(d)


def truth_sidecar(path) -> Path:
    """Conventional location of the truth sidecar for a dataset CSV."""
    path = Path(path)
    return path.with_name(path.stem + ".truth.json")
