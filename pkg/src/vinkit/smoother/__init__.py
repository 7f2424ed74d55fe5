"""Fixed-lag factor-graph smoother."""

from .factors import (
    DensePrior,
    Factor,
    GaugePrior,
    ImuFactor,
    LinearFactor,
    PriorFactor,
    VisualFactor,
    imu_factor_residual,
    imu_residual_body,
)
from .graph import (
    FactorGraph,
    OptimizeReport,
    information_matrix,
    marginal_covariance,
    marginalize,
    optimize,
    total_cost,
)
from .window import (
    SlidingWindowSmoother,
    SmootherConfig,
    initialize_window,
    select_keyframe,
)

__all__ = [
    "DensePrior", "Factor", "GaugePrior", "ImuFactor", "LinearFactor", "PriorFactor", "VisualFactor",
    "imu_factor_residual", "imu_residual_body", "FactorGraph", "OptimizeReport", "information_matrix",
    "marginal_covariance", "marginalize", "optimize", "total_cost", "SlidingWindowSmoother",
    "SmootherConfig", "initialize_window", "select_keyframe",
]
