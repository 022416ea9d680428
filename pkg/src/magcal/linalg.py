"""Small dense linear-algebra helpers and the affine-invariant SPD metric."""

from __future__ import annotations

import numpy as np

SYMMETRY_RTOL = 1e-12
EIGEN_RTOL = 1e-12


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix expected to be SPD is not."""


def skew(v) -> np.ndarray:
    """Return the cross-product matrix ``[v]x`` so that ``skew(v) @ w == cross(v, w)``.

    Accepts a single 3-vector or a stack of shape ``(..., 3)``.
    """
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def kron(a, b) -> np.ndarray:
    """Kronecker product; 1-D operands are treated as column vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    p, q = a.shape
    r, s = b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(p * r, q * s)


def vec(m) -> np.ndarray:
    """Stack the columns of ``m`` into a single vector."""
    return np.asarray(m, dtype=float).reshape(-1, order="F")


def unvec(v, rows: int, cols: int | None = None) -> np.ndarray:
    cols = rows if cols is None else cols
    return np.asarray(v, dtype=float).reshape((rows, cols), order="F")


def check_spd(m, name: str = "matrix") -> np.ndarray:
    """Validate and symmetrize a 3x3 SPD matrix.

    Returns the symmetrized copy. Raises ``NotPositiveDefiniteError`` when the
    matrix is asymmetric beyond round-off or has ``lambda_min <= 1e-12 * lambda_max``.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    scale = np.linalg.norm(m)
    if np.linalg.norm(m - m.T) > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise NotPositiveDefiniteError(f"{name} is not symmetric")
    m = 0.5 * (m + m.T)
    eig = np.linalg.eigvalsh(m)
    if eig[0] <= EIGEN_RTOL * eig[-1] or eig[-1] <= 0.0:
        raise NotPositiveDefiniteError(f"{name} is not positive definite (eigenvalues {eig})")
    return m


def spd_power(m, power: float) -> np.ndarray:
    """Matrix power of a (validated) SPD matrix via its eigendecomposition."""
    w, v = np.linalg.eigh(m)
    return (v * w**power) @ v.T


def spd_log(m) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.log(w)) @ v.T


def geodesic_distance(a, b) -> float:
    """Affine-invariant Riemannian distance ``||log(A^-1/2 B A^-1/2)||_F``."""
    a = check_spd(a, "a")
    b = check_spd(b, "b")
    a_isqrt = spd_power(a, -0.5)
    m = a_isqrt @ b @ a_isqrt
    lam = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(np.sqrt(np.sum(np.log(lam) ** 2)))


def normalize_det(m) -> np.ndarray:
    """Scale a 3x3 matrix with positive determinant to unit determinant."""
    m = np.asarray(m, dtype=float)
    d = np.linalg.det(m)
    if d <= 0:
        raise NotPositiveDefiniteError("determinant must be positive to normalize")
    return m / np.cbrt(d)
