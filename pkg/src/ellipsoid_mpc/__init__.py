"""Collision-free trajectory planning among ellipsoidal obstacles.

Minkowski-sum over-approximation collision constraints inside an SQP-solved
optimal control problem, with a closed-loop MPC simulator, an any-angle
reference planner, and a benchmark harness against the separating-hyperplane
formulation.
"""

from .geometry import (
    Ellipsoid,
    GammaInterval,
    beta_from_gamma,
    gamma_bounds,
    gamma_star,
    interiors_overlap,
    overapprox_shape,
    support_value,
)
from .collision import (
    ConstraintKind,
    ConstraintMode,
    ObstacleSet,
    fixed_eta_hat,
    fixed_gamma_hat,
    hyperplane_residuals,
    minkowski_residual,
)
from .dynamics import ControlInput, RobotShape, RobotState, rk4_step, rotate_shape

__all__ = [
    "Ellipsoid",
    "GammaInterval",
    "beta_from_gamma",
    "gamma_bounds",
    "gamma_star",
    "interiors_overlap",
    "overapprox_shape",
    "support_value",
    "ConstraintKind",
    "ConstraintMode",
    "ObstacleSet",
    "fixed_eta_hat",
    "fixed_gamma_hat",
    "hyperplane_residuals",
    "minkowski_residual",
    "ControlInput",
    "RobotShape",
    "RobotState",
    "rk4_step",
    "rotate_shape",
]

__version__ = "0.1.0"
