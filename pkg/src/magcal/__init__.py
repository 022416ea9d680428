"""Joint magnetometer hard/soft-iron and gyroscope bias calibration from angular rates."""

from magcal.linalg import geodesic_distance, kron, skew, unvec, vec
from magcal.model import (
    CalibrationResult,
    CalibrationState,
    FactorWindow,
    SensorSample,
    build_windows,
    contract_cholesky,
    expand_cholesky,
    residual,
    residual_jacobian,
)
from magcal.solver import (
    IncrementalEstimator,
    SolverConfig,
    detect_convergence,
    final_estimate,
    objective,
    solve_batch,
)

__all__ = [
    "CalibrationResult",
    "CalibrationState",
    "FactorWindow",
    "IncrementalEstimator",
    "SensorSample",
    "SolverConfig",
    "build_windows",
    "contract_cholesky",
    "detect_convergence",
    "expand_cholesky",
    "final_estimate",
    "geodesic_distance",
    "kron",
    "objective",
    "residual",
    "residual_jacobian",
    "skew",
    "solve_batch",
    "unvec",
    "vec",
]

__version__ = "0.1.0"
