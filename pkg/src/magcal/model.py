"""Attitude-free measurement model coupling magnetometer and gyroscope biases.

The state is ``x = [l (5), m_b (3), w_b (3)]`` where ``l`` parametrizes the
inverse soft-iron ``C = L L^T`` through a lower-triangular factor with an
exponential diagonal whose last entry is fixed so that ``det(C) = 1``.

For a factor built from a magnetic field sample ``m``, its time derivative
``m_dot`` and the measured angular rate ``w`` the residual is::

    r = [w - w_b]x (C m - m_b) + C m_dot

which vanishes for the true parameters regardless of the sensor attitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from magcal.linalg import check_spd, kron, skew

N_STATE = 11
PARAM_NAMES = (
    "l0", "l1", "l2", "l3", "l4",
    "mb_x", "mb_y", "mb_z",
    "wb_x", "wb_y", "wb_z",
)
EXP_BOUND = 30.0

# lower-triangular slots of L driven directly by l1, l3, l4
_OFFDIAG = {1: (1, 0), 3: (2, 0), 4: (2, 1)}


class CalibrationDivergence(ArithmeticError):
    """The exponential Cholesky parameters left the representable range."""


@dataclass
class CalibrationState:
    l: np.ndarray = field(default_factory=lambda: np.zeros(5))
    m_b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w_b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.l = np.asarray(self.l, dtype=float).reshape(5)
        self.m_b = np.asarray(self.m_b, dtype=float).reshape(3)
        self.w_b = np.asarray(self.w_b, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.as_vector())):
            raise ValueError("calibration state has non-finite entries")

    @classmethod
    def identity(cls) -> "CalibrationState":
        return cls()

    @classmethod
    def from_vector(cls, x) -> "CalibrationState":
        x = np.asarray(x, dtype=float)
        return cls(x[:5], x[5:8], x[8:11])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.l, self.m_b, self.w_b])


@dataclass
class CalibrationResult:
    """Expanded calibration: ``m_true ~ C m_meas - m_b`` and ``w_true = w_meas - w_b``.

    ``gyro_bias`` is ``None`` for magnetometer-only methods.
    """

    soft_iron: np.ndarray
    inverse_soft_iron: np.ndarray
    hard_iron: np.ndarray
    pseudo_hard_iron: np.ndarray
    gyro_bias: np.ndarray | None
    final_cost: float = float("nan")
    iterations: int = 0
    converged: bool = True
    method: str = "bfg"
    diagnostics: dict = field(default_factory=dict)
    state: CalibrationState | None = None

    @classmethod
    def from_state(cls, x: CalibrationState, **kwargs) -> "CalibrationResult":
        _, c = expand_cholesky(x.l)
        a = soft_iron_from_inverse(c)
        return cls(
            soft_iron=a,
            inverse_soft_iron=c,
            hard_iron=a @ x.m_b,
            pseudo_hard_iron=x.m_b.copy(),
            gyro_bias=x.w_b.copy(),
            state=x,
            **kwargs,
        )

    @classmethod
    def from_soft_iron(cls, soft_iron, hard_iron, gyro_bias=None, **kwargs) -> "CalibrationResult":
        """Build a result from a soft-iron matrix and a (true) hard-iron offset."""
        a = check_spd(soft_iron, "soft_iron")
        c = soft_iron_from_inverse(a)
        hard_iron = np.asarray(hard_iron, dtype=float)
        return cls(
            soft_iron=a,
            inverse_soft_iron=c,
            hard_iron=hard_iron,
            pseudo_hard_iron=c @ hard_iron,
            gyro_bias=None if gyro_bias is None else np.asarray(gyro_bias, dtype=float),
            **kwargs,
        )


@dataclass
class SensorSample:
    t: float
    mag: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        self.mag = np.asarray(self.mag, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float)


@dataclass
class FactorWindow:
    m: np.ndarray
    m_dot: np.ndarray
    w: np.ndarray
    t_mid: float = 0.0
    count: int = 2

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        self.m_dot = np.asarray(self.m_dot, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.count < 2:
            raise ValueError("a factor window aggregates at least two samples")


def soft_iron_from_inverse(c) -> np.ndarray:
    """Invert an SPD matrix keeping the result exactly symmetric."""
    inv = np.linalg.inv(c)
    return 0.5 * (inv + inv.T)


def expand_cholesky(l) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(L, C)`` with ``C = L L^T`` and ``det(C) = 1`` by construction."""
    l = np.asarray(l, dtype=float)
    if l.shape != (5,) or not np.all(np.isfinite(l)):
        raise ValueError("Cholesky parameters must be 5 finite numbers")
    if abs(l[0]) > EXP_BOUND or abs(l[2]) > EXP_BOUND:
        raise CalibrationDivergence(
            f"exponential parameters out of bounds (l0={l[0]:.3g}, l2={l[2]:.3g})"
        )
    e0 = np.exp(l[0])
    e2 = np.exp(l[2])
    L = np.array([
        [e0, 0.0, 0.0],
        [l[1], e2, 0.0],
        [l[3], l[4], 1.0 / (e0 * e2)],
    ])
    return L, L @ L.T


def cholesky_dL(l) -> np.ndarray:
    """Derivatives of ``L`` with respect to each of the 5 parameters, shape (5, 3, 3)."""
    L, _ = expand_cholesky(l)
    d = np.zeros((5, 3, 3))
    d[0, 0, 0] = L[0, 0]
    d[0, 2, 2] = -L[2, 2]
    d[2, 1, 1] = L[1, 1]
    d[2, 2, 2] = -L[2, 2]
    for k, (i, j) in _OFFDIAG.items():
        d[k, i, j] = 1.0
    return d


def dvecC_dl(l) -> np.ndarray:
    """Jacobian of ``vec(C)`` (column-major) with respect to ``l``, shape (9, 5)."""
    L, _ = expand_cholesky(l)
    dL = cholesky_dL(l)
    dC = dL @ L.T + L @ dL.transpose(0, 2, 1)
    return dC.transpose(0, 2, 1).reshape(5, 9).T


def contract_cholesky(c, det_tol: float = 1e-6) -> np.ndarray:
    """Inverse of :func:`expand_cholesky` for a unit-determinant SPD matrix."""
    c = check_spd(c, "c")
    det = np.linalg.det(c)
    if abs(det - 1.0) > det_tol:
        raise ValueError(f"determinant {det:.9g} is not 1 within {det_tol}")
    L = np.linalg.cholesky(c)
    return np.array([np.log(L[0, 0]), L[1, 0], np.log(L[1, 1]), L[2, 0], L[2, 1]])


def residual(x: CalibrationState, win: FactorWindow) -> np.ndarray:
    _, c = expand_cholesky(x.l)
    return skew(win.w - x.w_b) @ (c @ win.m - x.m_b) + c @ win.m_dot


def residual_jacobian(x: CalibrationState, win: FactorWindow) -> np.ndarray:
    """3x11 Jacobian ordered ``[d/dl | d/dm_b | d/dw_b]``."""
    _, c = expand_cholesky(x.l)
    omega = skew(win.w - x.w_b)
    j = np.empty((3, N_STATE))
    # vec(Omega C m) = (m^T kron Omega) vec(C), vec(C m_dot) = (m_dot^T kron I) vec(C)
    j[:, :5] = (kron(win.m[None, :], omega) + kron(win.m_dot[None, :], np.eye(3))) @ dvecC_dl(x.l)
    j[:, 5:8] = -omega
    j[:, 8:11] = skew(c @ win.m - x.m_b)
    return j


def stack_windows(windows: Sequence[FactorWindow]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = np.array([w.m for w in windows], dtype=float).reshape(-1, 3)
    md = np.array([w.m_dot for w in windows], dtype=float).reshape(-1, 3)
    om = np.array([w.w for w in windows], dtype=float).reshape(-1, 3)
    return m, md, om


def residuals_stacked(xvec, m, md, w) -> np.ndarray:
    """Vectorised residuals for N windows given as (N, 3) arrays, shape (N, 3)."""
    _, c = expand_cholesky(xvec[:5])
    v = m @ c.T - xvec[5:8]
    return np.cross(w - xvec[8:11], v) + md @ c.T


def jacobian_stacked(xvec, m, md, w) -> tuple[np.ndarray, np.ndarray]:
    """Residuals (N, 3) and Jacobians (N, 3, 11) for stacked windows."""
    _, c = expand_cholesky(xvec[:5])
    dvc = dvecC_dl(xvec[:5]).reshape(3, 3, 5, order="F")  # dC[i, j]/dl_k
    rate = w - xvec[8:11]
    v = m @ c.T - xvec[5:8]
    r = np.cross(rate, v) + md @ c.T
    n = m.shape[0]
    jac = np.empty((n, 3, N_STATE))
    dcm = np.einsum("ijk,nj->nik", dvc, m)  # d(C m)/dl
    dcmd = np.einsum("ijk,nj->nik", dvc, md)
    jac[:, :, :5] = np.einsum("nij,njk->nik", skew(rate), dcm) + dcmd
    jac[:, :, 5:8] = -skew(rate)
    jac[:, :, 8:11] = skew(v)
    return r, jac


def _derivatives(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-sample derivative: central differences inside, one-sided at the ends."""
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - x[:-2]) / (t[2:] - t[:-2])[:, None]
    d[0] = (x[1] - x[0]) / (t[1] - t[0])
    d[-1] = (x[-1] - x[-2]) / (t[-1] - t[-2])
    return d


def samples_to_arrays(stream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convert a sequence of :class:`SensorSample` into ``(t, mag, gyro)`` arrays."""
    if isinstance(stream, tuple) and len(stream) == 3:
        t, mag, gyro = (np.asarray(a, dtype=float) for a in stream)
        return t, mag.reshape(-1, 3), gyro.reshape(-1, 3)
    t = np.array([s.t for s in stream], dtype=float)
    mag = np.array([s.mag for s in stream], dtype=float).reshape(-1, 3)
    gyro = np.array([s.gyro for s in stream], dtype=float).reshape(-1, 3)
    return t, mag, gyro


def _slope(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Least-squares slope of each column of ``x`` against ``t``."""
    tc = t - t.mean()
    return (tc @ (x - x.mean(axis=0))) / (tc @ tc)


def build_windows(
    stream, theta: int, aggregator: str = "median", derivative: str = "central"
) -> list[FactorWindow]:
    """Aggregate consecutive chunks of ``theta`` samples into factor windows.

    ``stream`` is a sequence of :class:`SensorSample` or a ``(t, mag, gyro)``
    tuple of arrays. The trailing partial chunk is dropped. Field and rate are
    reduced with ``aggregator`` (median or mean). The field derivative is the
    aggregate of per-sample central differences (``derivative="central"``,
    one-sided at the window edges) or the least-squares slope over the window
    (``"slope"``, less noisy but biased on curved signals). Both use the actual
    timestamps and are exact for linear signals.
    """
    if theta < 2:
        raise ValueError("theta must be at least 2")
    if aggregator not in ("median", "mean"):
        raise ValueError(f"unknown aggregator {aggregator!r}")
    if derivative not in ("slope", "central"):
        raise ValueError(f"unknown derivative estimator {derivative!r}")
    t, mag, gyro = samples_to_arrays(stream)
    n = len(t) // theta
    if n == 0:
        raise ValueError(f"stream of {len(t)} samples is shorter than one window of {theta}")
    if np.any(np.diff(t) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    agg = np.median if aggregator == "median" else np.mean
    windows = []
    for k in range(n):
        sl = slice(k * theta, (k + 1) * theta)
        tk = t[sl]
        if derivative == "slope":
            m_dot = _slope(tk, mag[sl])
        else:
            m_dot = agg(_derivatives(tk, mag[sl]), axis=0)
        windows.append(FactorWindow(
            m=agg(mag[sl], axis=0),
            m_dot=m_dot,
            w=agg(gyro[sl], axis=0),
            t_mid=0.5 * (tk[0] + tk[-1]),
            count=theta,
        ))
    return windows
