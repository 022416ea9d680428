import csv
import json

import numpy as np
import pytest

from magcal import io as mio
from magcal.cli import aggregate_rows, default_theta, main
from magcal.model import CalibrationResult, SensorSample
from magcal.simulate import TruthParams, generate, preset
from magcal.solver import InsufficientExcitationWarning

HEADER = "t,mx,my,mz,wx,wy,wz"


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def wam_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "wam_3.csv"
    assert main(["simulate", "--preset", "wam", "--seed", "3", "--out", str(path)]) == 0
    return path


def run(capsys, argv):
    status = main([str(a) for a in argv])
    return status, json.loads(capsys.readouterr().out)


class TestReadDataset:
    def test_three_rows(self, tmp_path):
        p = write(tmp_path / "d.csv", HEADER + "\n0.0,1,2,3,0.1,0.2,0.3\n0.1,4,5,6,0.4,0.5,0.6\n0.2,7,8,9,0.7,0.8,0.9\n")
        ds = mio.read_dataset(p)
        assert len(ds.samples) == 3
        assert ds.samples[1].t == 0.1
        assert np.array_equal(ds.samples[2].mag, [7, 8, 9])
        assert np.array_equal(ds.samples[0].gyro, [0.1, 0.2, 0.3])
        assert ds.attitude is None

    def test_decreasing_time_names_row(self, tmp_path):
        p = write(tmp_path / "d.csv", HEADER + "\n0.0,1,2,3,0,0,0\n0.2,1,2,3,0,0,0\n0.1,1,2,3,0,0,0\n")
        with pytest.raises(mio.DatasetFormatError, match=r":4:"):
            mio.read_dataset(p)

    @pytest.mark.parametrize("body,pattern", [
        ("t,mx,my,mz,wx,wy\n0,1,2,3,0,0\n", "missing required columns"),
        (HEADER + "\n0,1,2,3,0,0\n", ":2: expected 7 fields"),
        (HEADER + "\n0,1,x,3,0,0,0\n", ":2: malformed number"),
        (HEADER + "\n0,1,nan,3,0,0,0\n", ":2: non-finite"),
        (HEADER + "\n", "no data rows"),
        ("", "empty file"),
    ])
    def test_malformed(self, tmp_path, body, pattern):
        with pytest.raises(mio.DatasetFormatError, match=pattern):
            mio.read_dataset(write(tmp_path / "d.csv", body))

    def test_truth_columns(self, tmp_path):
        p = write(tmp_path / "d.csv", HEADER + ",roll,pitch,heading\n0,1,2,3,0,0,0,0,0,90\n")
        assert np.allclose(mio.read_dataset(p).attitude, [[0, 0, np.pi / 2]])


class TestWriteDataset:
    def test_round_trip_bit_exact(self, tmp_path, wam_csv):
        ds = mio.read_dataset(wam_csv)
        out = tmp_path / "copy.csv"
        mio.write_dataset(ds, out)
        assert out.read_bytes() == wam_csv.read_bytes()

    def test_simulated_values_exact(self, tmp_path):
        sim = generate(preset("mam", seed=8, duration=20.0))
        path = tmp_path / "m.csv"
        mio.write_dataset(sim, path)
        back = mio.read_dataset(path)
        assert np.array_equal(back.arrays()[1], sim.mag)
        assert np.array_equal(back.arrays()[2], sim.gyro)
        assert np.array_equal(back.arrays()[0], sim.t)

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        mio.write_dataset(generate(preset("wam", seed=9)), a)
        mio.write_dataset(generate(preset("wam", seed=9)), b)
        assert a.read_bytes() == b.read_bytes()

    def test_row_count_and_header(self, wam_csv):
        lines = wam_csv.read_text().splitlines()
        assert lines[0] == HEADER + ",roll,pitch,heading"
        assert len(lines) - 1 == 6000

    def test_plain_header_without_truth(self, tmp_path):
        path = tmp_path / "p.csv"
        mio.write_dataset(mio.Dataset([SensorSample(0.0, [1, 2, 3], [0, 0, 0])]), path)
        assert path.read_text().splitlines()[0] == HEADER


class TestJson:
    def test_calibration_round_trip(self, tmp_path):
        t = TruthParams()
        a = t.soft_iron / np.cbrt(np.linalg.det(t.soft_iron))
        res = CalibrationResult.from_soft_iron(a, t.hard_iron, t.gyro_bias, method="bfg", converged=True)
        path = tmp_path / "c.json"
        mio.write_json(path, mio.calibration_to_dict(res))
        back = mio.calibration_from_dict(mio.read_json(path))
        assert np.array_equal(back.soft_iron, res.soft_iron)
        assert np.array_equal(back.pseudo_hard_iron, res.pseudo_hard_iron)
        assert np.array_equal(back.gyro_bias, res.gyro_bias)

    def test_bad_schema(self):
        with pytest.raises(mio.DatasetFormatError):
            mio.calibration_from_dict({"schema": "other/9"})

    def test_truth_round_trip(self, tmp_path):
        mio.write_truth(tmp_path / "t.json", TruthParams())
        assert np.array_equal(mio.read_truth(tmp_path / "t.json").soft_iron, TruthParams().soft_iron)


def test_default_theta_with_jitter(rng):
    t = np.cumsum(0.1 + rng.normal(0, 0.002, 200))
    assert default_theta(t) == 10


class TestCli:
    def test_simulate_writes_sidecar(self, wam_csv):
        assert mio.truth_sidecar(wam_csv).exists()

    def test_calibrate_bfg_within_bands(self, capsys, tmp_path, wam_csv):
        status, out = run(capsys, ["calibrate", "--method", "bfg", "--in", wam_csv, "--out", tmp_path])
        assert status == 0
        calib = mio.read_json(out["calibration"])
        assert calib["schema"] == mio.CALIBRATION_SCHEMA
        assert np.linalg.det(np.array(calib["soft_iron"])) == pytest.approx(1.0, abs=1e-9)
        m = out["metrics"]
        assert 9.668 * 0.7 <= m["field_magnitude_std"] <= 9.668 * 1.3
        assert m["heading_rmse"] < 20.0
        assert mio.read_json(out["report"])["schema"] == mio.REPORT_SCHEMA

    def test_ifg_agrees_with_bfg(self, capsys, tmp_path):
        sim = generate(preset("wam", seed=3, sigma_mag=0.0, sigma_gyro=0.0))
        path = tmp_path / "clean.csv"
        mio.write_dataset(sim, path)
        _, bfg = run(capsys, ["calibrate", "--method", "bfg", "--in", path, "--out", tmp_path])
        with pytest.warns(InsufficientExcitationWarning):
            status, ifg = run(capsys, ["calibrate", "--method", "ifg", "--in", path, "--out", tmp_path])
        assert status == 0
        a, b = mio.read_json(bfg["calibration"]), mio.read_json(ifg["calibration"])
        assert set(b["diagnostics"]["convergence_index"]) == {"soft_iron", "hard_iron", "gyro_bias"}
        # tail averaging over 80-100% of the data leaves a small gap, so compare relative to magnitude
        for key in ("soft_iron", "pseudo_hard_iron", "gyro_bias"):
            x, y = np.array(a[key]), np.array(b[key])
            assert np.max(np.abs(x - y)) <= 1e-3 * max(1.0, np.max(np.abs(x)))

    def test_evaluate_raw_and_calibrated(self, capsys, tmp_path, wam_csv):
        _, cal = run(capsys, ["calibrate", "--method", "ellipsoid", "--in", wam_csv, "--out", tmp_path])
        status, rep = run(capsys, ["evaluate", "--calib", cal["calibration"], "--in", wam_csv])
        assert status == 0 and rep["method_name"] == "ellipsoid"
        assert rep["gyro_bias_error"] is None
        status, raw = run(capsys, ["evaluate", "--in", wam_csv])
        assert status == 0 and raw["field_magnitude_std"] > rep["field_magnitude_std"]

    def test_identity_dataset(self, capsys, tmp_path):
        sim = generate(preset("wam", seed=2, truth=TruthParams.identity(), sigma_mag=0.0, sigma_gyro=0.0))
        path = tmp_path / "ident.csv"
        mio.write_dataset(sim, path)
        status, out = run(capsys, ["calibrate", "--in", path, "--out", tmp_path, "--theta", "5"])
        calib = mio.read_json(out["calibration"])
        assert status == 0
        assert np.allclose(calib["soft_iron"], np.eye(3), atol=1e-3)
        assert np.allclose(calib["gyro_bias"], 0, atol=1e-4)

    def test_missing_input_exit_2(self, capsys, tmp_path):
        status, out = run(capsys, ["calibrate", "--in", tmp_path / "nope.csv", "--out", tmp_path])
        assert status == 2 and out["error"] == "FileNotFoundError"

    def test_malformed_input_exit_2(self, capsys, tmp_path):
        p = write(tmp_path / "bad.csv", HEADER + "\n1,2\n")
        status, out = run(capsys, ["calibrate", "--in", p, "--out", tmp_path])
        assert status == 2 and "expected 7 fields" in out["detail"]

    def test_bad_theta_exit_2(self, capsys, tmp_path, wam_csv):
        status, _ = run(capsys, ["calibrate", "--in", wam_csv, "--out", tmp_path, "--theta", "1"])
        assert status == 2

    def test_benchmark_bookkeeping(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("MAGCAL_OUT_DIR", str(tmp_path))
        status, out = run(capsys, ["benchmark", "--methods", "bfg", "--presets", "wam", "--runs", "3", "--seed", "7"])
        assert status == 0
        data = mio.read_json(tmp_path / "benchmark.json")
        assert len(data["runs"]) == 3 and len(data["aggregate"]) == 1
        assert data["aggregate"][0]["failure_rate"] == 0.0
        with open(tmp_path / "benchmark_tidy.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["seed"] for r in rows} == {"7", "8", "9"}
        assert out["aggregate"] == data["aggregate"]


def test_aggregate_counts_failures():
    rows = [
        {"method_name": "ellipsoid", "dataset_name": "mam", "converged": False, "field_magnitude_std": None},
        {"method_name": "ellipsoid", "dataset_name": "mam", "converged": True, "field_magnitude_std": 12.0},
    ]
    (agg,) = aggregate_rows(rows)
    assert agg["failure_rate"] == 0.5
    assert agg["mean_field_magnitude_std"] == 12.0
