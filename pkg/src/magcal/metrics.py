"""Ellipsoid-fit baseline and the evaluation metrics used to compare calibrations."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from magcal.linalg import NotPositiveDefiniteError, geodesic_distance, normalize_det, spd_power
from magcal.model import CalibrationResult
from magcal.simulate import GIMBAL_TOL, TruthParams


class DegenerateFitError(ValueError):
    pass


@dataclass
class EvaluationReport:
    method_name: str
    dataset_name: str
    converged: bool
    soft_iron_geodesic_error: float | None = None
    hard_iron_error: float | None = None
    gyro_bias_error: float | None = None
    heading_rmse: float | None = None
    field_magnitude_std: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def ellipsoid_fit(mags) -> tuple[np.ndarray, np.ndarray, bool]:
    """Algebraic least-squares quadric fit.

    Fits ``x^T Q x + 2 b^T x + c = 0`` by the smallest right singular vector of
    the design matrix built on centred, scaled points (which makes the fit
    translation equivariant). Returns ``(soft_iron, center, converged)`` where
    ``soft_iron`` maps a sphere onto the fitted ellipsoid, normalised to unit
    determinant, and ``center`` is the hard-iron offset. ``converged`` is False
    when the quadric is not an ellipsoid; identity and the centroid are returned
    in that case.
    """
    pts = np.asarray(mags, dtype=float).reshape(-1, 3)
    if len(pts) < 9:
        raise DegenerateFitError("an ellipsoid fit needs at least 9 points")
    mean = pts.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum((pts - mean) ** 2, axis=1)))
    if not scale > 0:
        raise DegenerateFitError("all points coincide")
    x, y, z = ((pts - mean) / scale).T
    design = np.column_stack([
        x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z,
        2 * x, 2 * y, 2 * z, np.ones_like(x),
    ])
    _, sv, vt = np.linalg.svd(design, full_matrices=False)
    if sv[-2] <= 1e-12 * sv[0]:
        raise DegenerateFitError("design matrix is rank deficient: points do not determine a quadric")
    p = vt[-1]
    q = np.array([[p[0], p[3], p[4]], [p[3], p[1], p[5]], [p[4], p[5], p[2]]])
    b = p[6:9]
    if np.trace(q) < 0:
        q, b, c = -q, -b, -p[9]
    else:
        c = p[9]
    fallback = (np.eye(3), mean.copy(), False)
    eig = np.linalg.eigvalsh(q)
    if eig[0] <= 0:
        return fallback
    center = -np.linalg.solve(q, b)
    k = center @ q @ center - c
    if k <= 0:
        return fallback
    # (x - center)^T (Q / k) (x - center) = 1, so the sphere-to-ellipsoid map is (Q / k)^(-1/2)
    soft_iron = spd_power(q / k, -0.5)
    soft_iron = normalize_det(0.5 * (soft_iron + soft_iron.T))
    return soft_iron, mean + scale * center, True


def ellipsoid_calibration(mags) -> CalibrationResult:
    a, center, ok = ellipsoid_fit(mags)
    return CalibrationResult.from_soft_iron(
        a, center, gyro_bias=None, converged=ok, method="ellipsoid", iterations=1
    )


def apply_calibration(result: CalibrationResult, mags) -> np.ndarray:
    """Corrected field ``C m - m_b`` for each row of ``mags``."""
    mags = np.asarray(mags, dtype=float)
    return mags @ result.inverse_soft_iron.T - result.pseudo_hard_iron


def field_magnitude_std(fields) -> float:
    norms = np.linalg.norm(np.asarray(fields, dtype=float).reshape(-1, 3), axis=1)
    if len(norms) < 2:
        raise ValueError("need at least two samples")
    return float(np.std(norms, ddof=1))


def wrap_degrees(angle):
    """Map angles into (-180, 180]."""
    a = np.mod(np.asarray(angle, dtype=float) + 180.0, 360.0) - 180.0
    return np.where(a == -180.0, 180.0, a)


def tilt_compensated_heading(mag_corrected, roll, pitch, declination: float = 0.0):
    """Heading in degrees from a body-frame field vector levelled with roll and pitch (radians).

    The levelled field is ``Ry(pitch) Rx(roll) m``; with a north-east-down
    frame its horizontal direction is ``heading - declination``. ``declination``
    is in degrees, positive east; by default the raw magnetic heading is
    returned. Vectorised over leading dimensions.
    """
    m = np.asarray(mag_corrected, dtype=float)
    roll = np.asarray(roll, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    if np.any(np.abs(np.abs(pitch) - np.pi / 2) < GIMBAL_TOL):
        raise ValueError("pitch too close to +/-90 deg for tilt compensation")
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    mx, my, mz = m[..., 0], m[..., 1], m[..., 2]
    y_level = my * cr - mz * sr
    x_level = mx * cp + (my * sr + mz * cr) * sp
    return wrap_degrees(np.degrees(np.arctan2(-y_level, x_level)) + declination)


def heading_rmse(estimates, truth) -> float:
    """RMSE of wrapped heading differences, in degrees."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {tru.shape}")
    if est.size == 0:
        raise ValueError("need at least one heading")
    return float(np.sqrt(np.mean(wrap_degrees(est - tru) ** 2)))


def parameter_errors(result: CalibrationResult, truth: TruthParams) -> tuple[float, float, float | None]:
    """Soft-iron geodesic error, pseudo-hard-iron error and gyro-bias error.

    Both soft-irons are compared at unit determinant and the pseudo-hard-irons
    are rescaled by the same factors, which removes the scale the attitude-free
    model cannot observe.
    """
    a_true = truth.soft_iron
    s_true = np.cbrt(np.linalg.det(a_true))
    det_est = np.linalg.det(result.soft_iron)
    if det_est <= 0:
        raise NotPositiveDefiniteError("estimated soft-iron has non-positive determinant")
    s_est = np.cbrt(det_est)
    soft = geodesic_distance(a_true / s_true, result.soft_iron / s_est)
    hard = float(np.linalg.norm(s_true * truth.pseudo_hard_iron - s_est * result.pseudo_hard_iron))
    gyro = None
    if result.gyro_bias is not None:
        gyro = float(np.linalg.norm(truth.gyro_bias - result.gyro_bias))
    return soft, hard, gyro


def declination_deg(m0) -> float:
    """Magnetic declination (degrees east) of a north-east-down field vector."""
    return float(np.degrees(np.arctan2(m0[1], m0[0])))


def evaluate(
    result: CalibrationResult | None,
    mags,
    attitude=None,
    truth: TruthParams | None = None,
    method_name: str = "raw",
    dataset_name: str = "",
    declination: float = 0.0,
) -> EvaluationReport:
    """Score a calibration (or raw data when ``result`` is None) on a dataset.

    ``attitude`` holds roll, pitch, heading in radians per sample; heading
    metrics are skipped without it.
    """
    mags = np.asarray(mags, dtype=float)
    corrected = mags if result is None else apply_calibration(result, mags)
    report = EvaluationReport(
        method_name=method_name,
        dataset_name=dataset_name,
        converged=True if result is None else bool(result.converged),
        field_magnitude_std=field_magnitude_std(corrected),
    )
    if attitude is not None:
        att = np.asarray(attitude, dtype=float)
        est = tilt_compensated_heading(corrected, att[:, 0], att[:, 1], declination)
        report.heading_rmse = heading_rmse(est, np.degrees(att[:, 2]))
    if truth is not None and result is not None:
        soft, hard, gyro = parameter_errors(result, truth)
        report.soft_iron_geodesic_error = soft
        report.hard_iron_error = hard
        report.gyro_bias_error = gyro
    return report
