"""Monte Carlo generator for sinusoidal-attitude magnetometer/gyroscope datasets.

Attitude is heading-pitch-roll (ZYX): ``R = Rz(heading) Ry(pitch) Rx(roll)``
maps body vectors into a north-east-down world frame, so the body-frame field
is ``R^T m0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from magcal.linalg import check_spd
from magcal.model import FactorWindow, SensorSample

DEFAULT_M0 = (227.0, 52.0, 412.0)
DEFAULT_SOFT_IRON_UPPER = (1.10, 0.10, 0.04, 0.88, 0.02, 1.22)
DEFAULT_PSEUDO_HARD_IRON = (20.0, 120.0, 90.0)
DEFAULT_GYRO_BIAS = (4e-3, -5e-3, 2e-3)

DEFAULT_RATE_RANGES = ((0.05, 0.08), (0.1, 0.3), (0.2, 0.4))
PRESET_AMPLITUDES = {
    "wam": (5.0, 45.0, 360.0),
    "mam": (5.0, 5.0, 360.0),
    "lam": (5.0, 45.0, 90.0),
}
GIMBAL_TOL = 1e-6


def upper_to_symmetric(a) -> np.ndarray:
    """Symmetric 3x3 matrix from its upper triangle ``[a00, a01, a02, a11, a12, a22]``."""
    a00, a01, a02, a11, a12, a22 = a
    return np.array([[a00, a01, a02], [a01, a11, a12], [a02, a12, a22]], dtype=float)


@dataclass
class MotionSpec:
    amplitudes_deg: tuple[float, float, float]
    rate_ranges: tuple[tuple[float, float], ...] = DEFAULT_RATE_RANGES

    def __post_init__(self):
        if any(a <= 0 for a in self.amplitudes_deg):
            raise ValueError("motion amplitudes must be positive")
        if any(lo > hi for lo, hi in self.rate_ranges):
            raise ValueError("rate range lower bound exceeds upper bound")


@dataclass
class TruthParams:
    m0: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_M0))
    soft_iron: np.ndarray = field(default_factory=lambda: upper_to_symmetric(DEFAULT_SOFT_IRON_UPPER))
    pseudo_hard_iron: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_PSEUDO_HARD_IRON))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GYRO_BIAS))

    def __post_init__(self):
        self.m0 = np.asarray(self.m0, dtype=float)
        self.soft_iron = check_spd(self.soft_iron, "soft_iron")
        self.pseudo_hard_iron = np.asarray(self.pseudo_hard_iron, dtype=float)
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float)

    @classmethod
    def identity(cls, m0=DEFAULT_M0) -> "TruthParams":
        return cls(m0=m0, soft_iron=np.eye(3), pseudo_hard_iron=np.zeros(3), gyro_bias=np.zeros(3))

    @property
    def hard_iron(self) -> np.ndarray:
        return self.soft_iron @ self.pseudo_hard_iron

    def to_dict(self) -> dict:
        return {
            "m0": self.m0.tolist(),
            "soft_iron": self.soft_iron.tolist(),
            "pseudo_hard_iron": self.pseudo_hard_iron.tolist(),
            "gyro_bias": self.gyro_bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TruthParams":
        return cls(
            m0=d["m0"],
            soft_iron=d["soft_iron"],
            pseudo_hard_iron=d["pseudo_hard_iron"],
            gyro_bias=d["gyro_bias"],
        )


@dataclass
class DatasetSpec:
    motion: MotionSpec
    truth: TruthParams = field(default_factory=TruthParams)
    duration: float = 600.0
    rate: float = 10.0
    sigma_mag: float = 10.0
    sigma_gyro: float = 0.010
    rng_seed: int = 0
    name: str = "custom"

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.rate))


@dataclass
class SimulatedDataset:
    samples: list[SensorSample]
    truth_attitude: np.ndarray  # (N, 3) roll, pitch, heading in radians
    truth_body_rates: np.ndarray  # (N, 3)
    spec: DatasetSpec
    phases: np.ndarray
    rates: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    @property
    def mag(self) -> np.ndarray:
        return np.array([s.mag for s in self.samples])

    @property
    def gyro(self) -> np.ndarray:
        return np.array([s.gyro for s in self.samples])

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.t, self.mag, self.gyro


def euler_trajectory(spec: MotionSpec, t, phases, rates):
    """Angles ``A_i sin(w_i / A_i * t + phi_i)`` (radians) and their time derivatives.

    Returns ``(angles, angle_rates)``, each of shape ``t.shape + (3,)``.
    """
    t = np.asarray(t, dtype=float)[..., None]
    amp = np.deg2rad(np.asarray(spec.amplitudes_deg, dtype=float))
    freq = np.asarray(rates, dtype=float) / amp
    arg = freq * t + np.asarray(phases, dtype=float)
    return amp * np.sin(arg), np.asarray(rates, dtype=float) * np.cos(arg)


def rotation_matrix(roll, pitch, heading) -> np.ndarray:
    """Body-to-world rotation ``Rz(heading) Ry(pitch) Rx(roll)``; vectorised over inputs."""
    roll, pitch, heading = np.broadcast_arrays(
        np.asarray(roll, float), np.asarray(pitch, float), np.asarray(heading, float)
    )
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(heading), np.sin(heading)
    r = np.empty(roll.shape + (3, 3))
    r[..., 0, 0] = cy * cp
    r[..., 0, 1] = cy * sp * sr - sy * cr
    r[..., 0, 2] = cy * sp * cr + sy * sr
    r[..., 1, 0] = sy * cp
    r[..., 1, 1] = sy * sp * sr + cy * cr
    r[..., 1, 2] = sy * sp * cr - cy * sr
    r[..., 2, 0] = -sp
    r[..., 2, 1] = cp * sr
    r[..., 2, 2] = cp * cr
    return r


def euler_rates_to_body(roll, pitch, heading, euler_rates) -> np.ndarray:
    """Body angular velocity from ZYX Euler angle rates ``(roll_dot, pitch_dot, heading_dot)``."""
    roll = np.asarray(roll, dtype=float)
    pitch = np.asarray(pitch, dtype=float)
    if np.any(np.abs(np.abs(pitch) - np.pi / 2) < GIMBAL_TOL):
        raise ValueError("pitch at +/-90 deg: Euler kinematics are singular")
    rates = np.asarray(euler_rates, dtype=float)
    dr, dp, dy = rates[..., 0], rates[..., 1], rates[..., 2]
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    return np.stack([
        dr - dy * sp,
        dp * cr + dy * sr * cp,
        -dp * sr + dy * cr * cp,
    ], axis=-1)


def _draw_motion(spec: DatasetSpec, rng: np.random.Generator):
    phases = rng.uniform(-np.pi, np.pi, size=3)
    rates = np.array([rng.uniform(lo, hi) for lo, hi in spec.motion.rate_ranges])
    return phases, rates


def true_kinematics(spec: DatasetSpec, t, phases, rates):
    """Noise-free attitude, body rates and body-frame true field at times ``t``."""
    angles, angle_rates = euler_trajectory(spec.motion, t, phases, rates)
    roll, pitch, heading = angles[..., 0], angles[..., 1], angles[..., 2]
    w_body = euler_rates_to_body(roll, pitch, heading, angle_rates)
    rot = rotation_matrix(roll, pitch, heading)
    m_true = np.einsum("nji,j->ni", rot, spec.truth.m0)
    return angles, w_body, m_true


def generate(spec: DatasetSpec) -> SimulatedDataset:
    """Simulate ``duration * rate`` corrupted samples; bit-reproducible from ``spec.rng_seed``."""
    rng = np.random.default_rng(spec.rng_seed)
    phases, rates = _draw_motion(spec, rng)
    n = spec.n_samples
    t = np.arange(n) / spec.rate
    angles, w_body, m_true = true_kinematics(spec, t, phases, rates)
    truth = spec.truth
    mag = (m_true + truth.pseudo_hard_iron) @ truth.soft_iron.T
    gyro = w_body + truth.gyro_bias
    mag = mag + rng.normal(0.0, 1.0, size=(n, 3)) * spec.sigma_mag
    gyro = gyro + rng.normal(0.0, 1.0, size=(n, 3)) * spec.sigma_gyro
    samples = [SensorSample(float(t[i]), mag[i], gyro[i]) for i in range(n)]
    return SimulatedDataset(samples, angles, w_body, spec, phases, rates)


def exact_windows(dataset: SimulatedDataset, times=None) -> list[FactorWindow]:
    """Factor windows holding the exact measured field, its derivative and rate at ``times``.

    No windowing or differencing approximation: the residual at the truth is zero
    up to round-off. Defaults to one window per second of the dataset.
    """
    spec = dataset.spec
    if times is None:
        times = np.arange(0.5, spec.duration, 1.0)
    times = np.asarray(times, dtype=float)
    _, w_body, m_true = true_kinematics(spec, times, dataset.phases, dataset.rates)
    a = spec.truth.soft_iron
    mag = (m_true + spec.truth.pseudo_hard_iron) @ a.T
    # d/dt (R^T m0) = -[w]x R^T m0
    mag_dot = -np.cross(w_body, m_true) @ a.T
    gyro = w_body + spec.truth.gyro_bias
    return [FactorWindow(mag[i], mag_dot[i], gyro[i], float(times[i])) for i in range(len(times))]


def preset(name: str, seed: int = 0, **overrides) -> DatasetSpec:
    """Spec for one of the ``wam``, ``mam`` or ``lam`` motion envelopes."""
    key = name.lower()
    if key not in PRESET_AMPLITUDES:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESET_AMPLITUDES)}")
    spec = DatasetSpec(motion=MotionSpec(PRESET_AMPLITUDES[key]), rng_seed=seed, name=key)
    return replace(spec, **overrides) if overrides else spec
