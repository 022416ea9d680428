"""Batch and incremental least-squares estimation over the single-node factor model."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from magcal.linalg import check_spd
from magcal.model import (
    N_STATE,
    PARAM_NAMES,
    CalibrationResult,
    CalibrationState,
    FactorWindow,
    expand_cholesky,
    jacobian_stacked,
    residuals_stacked,
    stack_windows,
)

log = logging.getLogger(__name__)

RANK_COND_LIMIT = 1e12


class InsufficientExcitationWarning(UserWarning):
    """The normal equations are rank deficient: some parameters are unobservable."""


@dataclass
class SolverConfig:
    noise_covariance: np.ndarray = field(default_factory=lambda: np.eye(3) * 1e-6)
    rel_tol: float = 1e-7
    abs_tol: float = 1e-7
    max_iterations: int = 100
    incremental_iterations: int = 10
    damping_init: float = 1e-4
    damping_scale: float = 10.0

    def __post_init__(self):
        self.noise_covariance = check_spd(self.noise_covariance, "noise_covariance")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1 or self.incremental_iterations < 1:
            raise ValueError("iteration limits must be positive")
        if self.damping_scale <= 1:
            raise ValueError("damping_scale must exceed 1")

    def whitener(self) -> np.ndarray:
        """Matrix ``W`` with ``W^T W = inv(Sigma)``."""
        return np.linalg.inv(np.linalg.cholesky(self.noise_covariance))


def _as_arrays(windows):
    if isinstance(windows, tuple):
        return windows
    if len(windows) == 0:
        raise ValueError("at least one factor window is required")
    return stack_windows(windows)


def objective(x: CalibrationState, windows: Sequence[FactorWindow], cfg: SolverConfig | None = None) -> float:
    """Sum of squared Mahalanobis residual norms over all windows."""
    cfg = cfg or SolverConfig()
    m, md, w = _as_arrays(windows)
    r = residuals_stacked(x.as_vector(), m, md, w) @ cfg.whitener().T
    return float(np.sum(r * r))


def rank_diagnostic(h: np.ndarray) -> dict:
    """Condition of the Jacobi-scaled normal matrix and its weakest direction.

    Scaling by the diagonal removes the unit mismatch between the Cholesky,
    milligauss and rad/s blocks so the condition number reflects excitation only.
    """
    d = np.sqrt(np.clip(np.diag(h), 0.0, None))
    d[d == 0] = 1.0
    hs = h / np.outer(d, d)
    eig, vec = np.linalg.eigh(0.5 * (hs + hs.T))
    lam_max = max(eig[-1], np.finfo(float).tiny)
    cond = float(lam_max / eig[0]) if eig[0] > 0 else float("inf")
    deficient = not (cond <= RANK_COND_LIMIT)
    diag = {"condition_number": cond, "rank_deficient": deficient}
    if deficient:
        null = vec[:, 0]
        weights = null**2
        diag["unobservable"] = [PARAM_NAMES[i] for i in np.argsort(weights)[::-1] if weights[i] > 0.05]
    return diag


def _levenberg_marquardt(x0: np.ndarray, arrays, cfg: SolverConfig, max_iterations: int):
    """Minimise the whitened residuals; returns (x, cost, iterations, converged, costs, H)."""
    m, md, w = arrays
    wt = cfg.whitener()
    x = x0.copy()
    r, jac = jacobian_stacked(x, m, md, w)
    r = r @ wt.T
    jac = np.einsum("ij,njk->nik", wt, jac)
    cost = float(np.sum(r * r))
    costs = [cost]
    lam = None
    converged = False
    it = 0
    while it < max_iterations:
        it += 1
        J = jac.reshape(-1, N_STATE)
        h = J.T @ J
        g = J.T @ r.reshape(-1)
        if np.max(np.abs(g)) < cfg.abs_tol:
            converged = True
            break
        if lam is None:
            lam = cfg.damping_init
        # Marquardt scaling: the blocks differ in units by orders of magnitude
        scale = np.maximum(np.diag(h), 1e-12 * max(np.max(np.diag(h)), 1e-300))
        accepted = False
        while not accepted:
            try:
                factor = np.linalg.cholesky(h + lam * np.diag(scale))
                step = -np.linalg.solve(factor.T, np.linalg.solve(factor, g))
                x_new = x + step
                r_new = residuals_stacked(x_new, m, md, w) @ wt.T
                cost_new = float(np.sum(r_new * r_new))
            except (np.linalg.LinAlgError, ArithmeticError, FloatingPointError):
                cost_new = np.inf
            if np.isfinite(cost_new) and cost_new <= cost:
                accepted = True
                lam = max(lam / cfg.damping_scale, 1e-300)
            else:
                lam *= cfg.damping_scale
                if lam > 1e300 or not np.isfinite(lam):
                    break
        if not accepted:
            # no descent direction left at this precision
            converged = True
            break
        reduction = cost - cost_new
        x = x_new
        r, jac = jacobian_stacked(x, m, md, w)
        r = r @ wt.T
        jac = np.einsum("ij,njk->nik", wt, jac)
        cost = cost_new
        costs.append(cost)
        if reduction < cfg.abs_tol or reduction < cfg.rel_tol * (cost + reduction):
            converged = True
            break
    J = jac.reshape(-1, N_STATE)
    return x, cost, it, converged, costs, J.T @ J


def solve_batch(
    windows: Sequence[FactorWindow],
    cfg: SolverConfig | None = None,
    x0: CalibrationState | None = None,
) -> CalibrationResult:
    """Levenberg-Marquardt over all factor windows at once.

    Emits :class:`InsufficientExcitationWarning` when the final normal matrix is
    rank deficient; the diagnostic is also stored in ``result.diagnostics``.
    """
    cfg = cfg or SolverConfig()
    x0 = x0 or CalibrationState.identity()
    arrays = _as_arrays(windows)
    if arrays[0].shape[0] < 4:
        raise ValueError("batch calibration needs at least 4 windows (11 unknowns, 3 equations each)")
    x, cost, it, converged, costs, h = _levenberg_marquardt(x0.as_vector(), arrays, cfg, cfg.max_iterations)
    diag = rank_diagnostic(h)
    diag["cost_history"] = costs
    log.debug("batch solve: %d iterations, cost %.6g, cond %.3g", it, cost, diag["condition_number"])
    if diag["rank_deficient"]:
        warnings.warn(
            f"insufficient excitation: weakly observable {diag['unobservable']}",
            InsufficientExcitationWarning,
            stacklevel=2,
        )
    state = CalibrationState.from_vector(x)
    return CalibrationResult.from_state(
        state, final_cost=cost, iterations=it, converged=converged, method="bfg", diagnostics=diag
    )


class IncrementalEstimator:
    """Online estimator: each new window adds a factor and triggers a warm-started update.

    Not thread-safe; a single owner should feed windows.
    """

    def __init__(self, cfg: SolverConfig | None = None, x0: CalibrationState | None = None):
        self.cfg = cfg or SolverConfig()
        self.state = x0 or CalibrationState.identity()
        self.windows: list[FactorWindow] = []
        self.history: list[CalibrationState] = []
        self.diagnostics: dict = {}
        self._m = np.empty((0, 3))
        self._md = np.empty((0, 3))
        self._w = np.empty((0, 3))

    def add(self, win: FactorWindow) -> "IncrementalEstimator":
        self.windows.append(win)
        self._m = np.vstack([self._m, win.m])
        self._md = np.vstack([self._md, win.m_dot])
        self._w = np.vstack([self._w, win.w])
        x, cost, it, converged, _, h = _levenberg_marquardt(
            self.state.as_vector(), (self._m, self._md, self._w), self.cfg, self.cfg.incremental_iterations
        )
        self.state = CalibrationState.from_vector(x)
        self.history.append(self.state)
        self.diagnostics = rank_diagnostic(h)
        self.diagnostics.update(cost=cost, iterations=it, converged=converged)
        if self.diagnostics["rank_deficient"]:
            warnings.warn(
                f"insufficient excitation after {len(self.windows)} windows: "
                f"weakly observable {self.diagnostics['unobservable']}",
                InsufficientExcitationWarning,
                stacklevel=2,
            )
        return self

    def extend(self, windows: Sequence[FactorWindow]) -> "IncrementalEstimator":
        for win in windows:
            self.add(win)
        return self

    @property
    def rank_deficient(self) -> bool:
        return bool(self.diagnostics.get("rank_deficient", False))

    def result(self) -> CalibrationResult:
        """The latest state expanded, without tail averaging."""
        return CalibrationResult.from_state(
            self.state,
            final_cost=self.diagnostics.get("cost", float("nan")),
            iterations=len(self.history),
            converged=bool(self.diagnostics.get("converged", False)),
            method="ifg",
            diagnostics=dict(self.diagnostics),
        )


def incremental_add(est: IncrementalEstimator, win: FactorWindow) -> IncrementalEstimator:
    return est.add(win)


def final_estimate(est_or_history, tail_fraction: float = 0.2) -> CalibrationResult:
    """Average the trailing ``tail_fraction`` of the state history and expand it."""
    history = est_or_history.history if isinstance(est_or_history, IncrementalEstimator) else est_or_history
    if len(history) < 5:
        raise ValueError(f"need at least 5 history entries, got {len(history)}")
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    k = max(1, int(round(len(history) * tail_fraction)))
    tail = np.array([h.as_vector() for h in history[-k:]])
    state = CalibrationState.from_vector(tail.mean(axis=0))
    diag = {}
    converged = True
    if isinstance(est_or_history, IncrementalEstimator):
        diag = {key: v for key, v in est_or_history.diagnostics.items()}
        converged = not est_or_history.rank_deficient
    diag["tail_entries"] = k
    return CalibrationResult.from_state(
        state, iterations=len(history), converged=converged, method="ifg", diagnostics=diag
    )


def _blocks(x: CalibrationState) -> dict[str, np.ndarray]:
    _, c = expand_cholesky(x.l)
    a = np.linalg.inv(c)
    return {"soft_iron": a.ravel(), "hard_iron": a @ x.m_b, "gyro_bias": x.w_b}


def detect_convergence(
    history: Sequence[CalibrationState], window: int = 10, rel_tol: float = 1e-3
) -> dict[str, int | None]:
    """First history index at which each parameter block has settled.

    A block is settled at index ``i`` when, over entries ``i - window + 1 .. i``,
    every pairwise difference satisfies ``|x_a - x_b| <= rel_tol * |x_b|``
    (Euclidean norms of the block). Blocks are the soft-iron matrix, the
    hard-iron vector ``A m_b`` and the gyro bias.
    """
    if len(history) == 0:
        raise ValueError("history is empty")
    blocks = [_blocks(h) for h in history]
    out: dict[str, int | None] = {}
    for name in ("soft_iron", "hard_iron", "gyro_bias"):
        vals = np.array([b[name] for b in blocks])
        norms = np.linalg.norm(vals, axis=1)
        out[name] = None
        for i in range(window - 1, len(vals)):
            seg = vals[i - window + 1 : i + 1]
            seg_norm = norms[i - window + 1 : i + 1]
            diff = np.linalg.norm(seg[:, None, :] - seg[None, :, :], axis=2)
            if np.all(diff <= rel_tol * seg_norm[None, :]):
                out[name] = i
                break
    return out
