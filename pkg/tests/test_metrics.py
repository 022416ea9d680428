import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from magcal.linalg import NotPositiveDefiniteError
from magcal.model import CalibrationResult
from magcal.metrics import (
    DegenerateFitError,
    apply_calibration,
    declination_deg,
    ellipsoid_calibration,
    ellipsoid_fit,
    evaluate,
    field_magnitude_std,
    heading_rmse,
    parameter_errors,
    tilt_compensated_heading,
    wrap_degrees,
)
from magcal.simulate import TruthParams, generate, preset

# frozen with a 40-digit mpmath eigen-computation (see test_linalg)
GEODESIC_REF_TO_I = 0.28410745104759825
GYRO_BIAS_NORM = 0.006708203932499369


def sphere_points(rng, n=500, radius=479.0):
    x = rng.normal(size=(n, 3))
    return radius * x / np.linalg.norm(x, axis=1, keepdims=True)


def truth_result(truth: TruthParams, normalized=False) -> CalibrationResult:
    a, hard = truth.soft_iron, truth.hard_iron
    if normalized:
        a = a / np.cbrt(np.linalg.det(a))
    return CalibrationResult.from_soft_iron(a, hard, truth.gyro_bias)


class TestEllipsoidFit:
    def test_sphere(self, rng):
        a, center, ok = ellipsoid_fit(sphere_points(rng))
        assert ok
        assert np.allclose(a, np.eye(3), atol=1e-6)
        assert np.allclose(center, 0, atol=1e-6)

    def test_synthetic_ellipsoid(self, rng):
        truth = TruthParams()
        pts = (sphere_points(rng) + truth.pseudo_hard_iron) @ truth.soft_iron.T
        a, center, ok = ellipsoid_fit(pts)
        assert ok
        assert np.allclose(a, truth.soft_iron / np.cbrt(np.linalg.det(truth.soft_iron)), atol=1e-6)
        assert np.allclose(center, truth.hard_iron, atol=1e-6)
        assert np.linalg.det(a) == pytest.approx(1.0, abs=1e-9)

    def test_translation_equivariance(self, rng):
        pts = (sphere_points(rng) + [20, 120, 90]) @ TruthParams().soft_iron.T
        pts = pts + rng.normal(0, 10, pts.shape)
        d = np.array([300.0, -150.0, 75.0])
        a0, c0, _ = ellipsoid_fit(pts)
        a1, c1, _ = ellipsoid_fit(pts + d)
        assert np.allclose(c1 - c0, d, rtol=0, atol=1e-9)
        assert np.allclose(a0, a1, atol=1e-9)

    def test_non_ellipsoid_flagged(self, rng):
        # a hyperboloid of one sheet: x^2 + y^2 - z^2 = 1
        u, v = rng.uniform(0, 2 * np.pi, 300), rng.uniform(-1, 1, 300)
        pts = np.column_stack([np.cosh(v) * np.cos(u), np.cosh(v) * np.sin(u), np.sinh(v)]) * 100
        a, center, ok = ellipsoid_fit(pts)
        assert not ok
        assert np.array_equal(a, np.eye(3))

    def test_degenerate(self):
        with pytest.raises(DegenerateFitError):
            ellipsoid_fit(np.ones((20, 3)))
        with pytest.raises(DegenerateFitError):
            ellipsoid_fit(np.zeros((5, 3)))
        plane = np.column_stack([np.cos(np.arange(30.0)), np.sin(np.arange(30.0)), np.zeros(30)])
        with pytest.raises(DegenerateFitError):
            ellipsoid_fit(plane)

    def test_calibration_wrapper(self, rng):
        res = ellipsoid_calibration(sphere_points(rng) + 5.0)
        assert res.method == "ellipsoid" and res.gyro_bias is None
        assert np.allclose(res.hard_iron, 5.0, atol=1e-6)


class TestApplyCalibration:
    def test_identity(self, rng):
        m = rng.normal(0, 300, (10, 3))
        res = CalibrationResult.from_soft_iron(np.eye(3), np.zeros(3))
        assert np.allclose(apply_calibration(res, m), m, atol=1e-12)

    def test_truth_constant_norm(self, wam_clean):
        corrected = apply_calibration(truth_result(wam_clean.spec.truth, normalized=True), wam_clean.mag)
        norms = np.linalg.norm(corrected, axis=1)
        assert norms.max() - norms.min() < 1e-9 * norms.mean()

    @pytest.mark.parametrize("name", ["wam", "mam", "lam"])
    def test_truth_improves_spread(self, name):
        ds = generate(preset(name, seed=5))
        res = truth_result(ds.spec.truth, normalized=True)
        raw = np.linalg.norm(ds.mag, axis=1)
        cor = np.linalg.norm(apply_calibration(res, ds.mag), axis=1)
        assert cor.std() / cor.mean() < raw.std() / raw.mean()
        assert field_magnitude_std(cor[:, None] * [1, 0, 0]) < field_magnitude_std(ds.mag)


def test_field_std_constant_norm(rng):
    pts = sphere_points(rng, 50)
    assert field_magnitude_std(pts) < 1e-12
    with pytest.raises(ValueError):
        field_magnitude_std([[1.0, 0, 0]])


class TestHeading:
    def test_north(self):
        assert tilt_compensated_heading([227.0, 0, 412.0], 0.0, 0.0) == pytest.approx(0.0, abs=1e-12)

    def test_east(self):
        # heading 90 deg: the body sees north along -y
        assert tilt_compensated_heading([0.0, -227.0, 412.0], 0.0, 0.0) == pytest.approx(90.0)
        assert tilt_compensated_heading([0.0, 227.0, 412.0], 0.0, 0.0) == pytest.approx(-90.0)

    def test_south_is_plus_180(self):
        assert tilt_compensated_heading([-227.0, 0.0, 412.0], 0.0, 0.0) == 180.0

    def test_matches_truth_on_clean_run(self, wam_clean):
        truth = wam_clean.spec.truth
        corrected = apply_calibration(truth_result(truth), wam_clean.mag)
        att = wam_clean.truth_attitude
        est = tilt_compensated_heading(corrected, att[:, 0], att[:, 1], declination_deg(truth.m0))
        err = wrap_degrees(est - np.degrees(att[:, 2]))
        assert np.max(np.abs(err)) < 1e-6

    def test_gimbal(self):
        with pytest.raises(ValueError):
            tilt_compensated_heading([1.0, 0, 0], 0.0, np.pi / 2)

    def test_declination_of_reference_field(self):
        assert declination_deg([227, 52, 412]) == pytest.approx(12.902, abs=1e-3)


class TestWrapAndRmse:
    @pytest.mark.parametrize("angle,expected", [(180, 180), (-180, 180), (540, 180), (181, -179), (0, 0), (-359, 1)])
    def test_wrap(self, angle, expected):
        assert wrap_degrees(angle) == pytest.approx(expected)

    def test_identical(self):
        assert heading_rmse([10, 20, 30], [10, 20, 30]) == 0.0

    def test_wraparound(self):
        assert heading_rmse([359.5], [0.5]) == pytest.approx(1.0)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            heading_rmse([1, 2], [1])
        with pytest.raises(ValueError):
            heading_rmse([], [])

    @given(st.lists(st.floats(-720, 720), min_size=1, max_size=20), st.data())
    def test_invariant_to_full_turns(self, est, data):
        truth = data.draw(st.lists(st.floats(-720, 720), min_size=len(est), max_size=len(est)))
        shift = data.draw(st.lists(st.integers(-2, 2), min_size=len(est), max_size=len(est)))
        shifted = np.asarray(est) + 360.0 * np.asarray(shift)
        assert heading_rmse(shifted, truth) == pytest.approx(heading_rmse(est, truth), abs=1e-9)


class TestParameterErrors:
    def test_truth_is_zero(self):
        truth = TruthParams()
        soft, hard, gyro = parameter_errors(truth_result(truth), truth)
        assert soft < 1e-12 and hard < 1e-12 and gyro == 0.0

    def test_scale_invariant(self):
        truth = TruthParams()
        soft, hard, _ = parameter_errors(truth_result(truth, normalized=True), truth)
        assert soft < 1e-12 and hard < 1e-12

    def test_identity_estimate(self):
        truth = TruthParams()
        res = CalibrationResult.from_soft_iron(np.eye(3), np.zeros(3), np.zeros(3))
        soft, hard, gyro = parameter_errors(res, truth)
        assert soft == pytest.approx(GEODESIC_REF_TO_I, abs=1e-12)
        assert hard == pytest.approx(np.cbrt(1.167072) * np.linalg.norm([20, 120, 90]), rel=1e-12)
        assert gyro == pytest.approx(GYRO_BIAS_NORM, abs=1e-15)

    def test_symmetric_soft_error(self, rng):
        from conftest import random_spd

        a, b = random_spd(rng), random_spd(rng)
        ta = TruthParams(soft_iron=a)
        tb = TruthParams(soft_iron=b)
        ab = parameter_errors(truth_result(tb), ta)[0]
        ba = parameter_errors(truth_result(ta), tb)[0]
        assert ab == pytest.approx(ba, abs=1e-12)

    def test_ellipsoid_has_no_gyro(self, rng):
        res = ellipsoid_calibration(sphere_points(rng))
        assert parameter_errors(res, TruthParams())[2] is None

    def test_non_spd_estimate(self):
        res = CalibrationResult.from_soft_iron(np.eye(3), np.zeros(3))
        res.soft_iron = -np.eye(3)
        with pytest.raises(NotPositiveDefiniteError):
            parameter_errors(res, TruthParams())


def test_evaluate_report(wam_noisy):
    truth = wam_noisy.spec.truth
    raw = evaluate(None, wam_noisy.mag, wam_noisy.truth_attitude)
    good = evaluate(truth_result(truth), wam_noisy.mag, wam_noisy.truth_attitude, truth, "truth", "wam")
    assert raw.soft_iron_geodesic_error is None
    assert good.field_magnitude_std < raw.field_magnitude_std
    assert good.heading_rmse < raw.heading_rmse
    assert good.soft_iron_geodesic_error < 1e-12
    d = good.to_dict()
    assert d["method_name"] == "truth" and d["converged"] is True
