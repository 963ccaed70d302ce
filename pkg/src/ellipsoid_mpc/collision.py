"""Collision-avoidance constraint formulations with analytic derivatives.

Four interchangeable formulations keep the robot ellipsoid clear of each
obstacle ellipsoid:

* Minkowski residual with the mixing parameter gamma kept as an optimization
  variable (non-conservative: the over-approximation can be made tight),
* the same residual with gamma frozen at a cheap closed-form guess computed
  from a warm-start trajectory,
* a separating hyperplane whose normal eta is an optimization variable,
* a separating hyperplane with eta frozen at the shortest-vector direction.

The Minkowski residual for robot position p, rotated robot shape Grot,
obstacle (t, M) and parameter gamma is

    r = (p - t)^T [ (1+e^g) Grot + (1+e^-g) M ]^{-1} (p - t),

and r >= 1 for any gamma certifies disjoint interiors. All residuals come
with exact gradients with respect to (px, py, theta) and their own parameter;
the theta dependence enters through the rotation of the robot shape.
"""

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


def _sym_solve2(B: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a 2x2 SPD system by an inlined Cholesky factorization."""
    l11 = math.sqrt(B[0, 0])
    l21 = B[1, 0] / l11
    l22 = math.sqrt(B[1, 1] - l21 * l21)
    y0 = rhs[0] / l11
    y1 = (rhs[1] - l21 * y0) / l22
    w1 = y1 / l22
    w0 = (y0 - l21 * w1) / l11
    return np.array([w0, w1])


def _shape_solve(B: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if B.shape[0] == 2:
        return _sym_solve2(B, rhs)
    return cho_solve(cho_factor(B, lower=True, check_finite=False), rhs)

from .geometry import Ellipsoid, GammaInterval, gamma_bounds, gamma_star
from .oracles import _alternating_projection_pair
from .dynamics import _SKEW, RobotShape, rotate_shape

__all__ = [
    "ConstraintKind",
    "ConstraintMode",
    "ObstacleSet",
    "minkowski_residual",
    "minkowski_jacobian",
    "hyperplane_residuals",
    "hyperplane_jacobian",
    "fixed_gamma_hat",
    "fixed_eta_hat",
    "tightest_gamma",
    "ETA_NORM_FLOOR",
]

logger = logging.getLogger(__name__)

# Lower bound on eta^T eta in the free-eta NLP; excludes the degenerate
# eta = 0 point where the separation residual loses its gradient.
ETA_NORM_FLOOR = 1e-4


class ConstraintKind(enum.Enum):
    MINKOWSKI_FREE_GAMMA = "free-gamma"
    MINKOWSKI_FIXED_GAMMA = "fixed-gamma"
    HYPERPLANE_FREE_ETA = "free-eta"
    HYPERPLANE_FIXED_ETA = "fixed-eta"

    @property
    def is_fixed(self) -> bool:
        return self in (
            ConstraintKind.MINKOWSKI_FIXED_GAMMA,
            ConstraintKind.HYPERPLANE_FIXED_ETA,
        )

    @property
    def is_minkowski(self) -> bool:
        return self in (
            ConstraintKind.MINKOWSKI_FREE_GAMMA,
            ConstraintKind.MINKOWSKI_FIXED_GAMMA,
        )


@dataclass(frozen=True)
class ConstraintMode:
    """Formulation choice plus a dimensionless safety margin.

    The margin is added to the residual requirement: Minkowski residuals must
    reach 1 + margin, hyperplane separations must reach margin.
    """

    kind: ConstraintKind
    safety_margin: float = 0.0

    def __post_init__(self):
        if self.safety_margin < 0.0:
            raise ValueError("safety margin must be nonnegative")


@dataclass(frozen=True)
class ObstacleSet:
    """Immutable collection of ellipsoidal obstacles."""

    obstacles: tuple[Ellipsoid, ...]

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    def __len__(self) -> int:
        return len(self.obstacles)

    def __iter__(self):
        return iter(self.obstacles)

    def __getitem__(self, m: int) -> Ellipsoid:
        return self.obstacles[m]

    def gamma_boxes(self, robot: RobotShape, limit: float = 20.0) -> list[GammaInterval]:
        """Per-obstacle gamma bounds intersected with [-limit, limit].

        Rotations do not change the robot shape's eigenvalues, so the bounds
        are constant along a trajectory.
        """
        G = robot.base_shape
        boxes = []
        for obs in self.obstacles:
            b = gamma_bounds(G, obs.shape)
            boxes.append(GammaInterval(max(b.lower, -limit), min(b.upper, limit)))
        return boxes


def _minkowski_terms(
    p: np.ndarray,
    theta: float,
    G: np.ndarray,
    t_m: np.ndarray,
    M_m: np.ndarray,
    gamma: float,
) -> tuple[float, np.ndarray]:
    """Residual and its gradient over (px, py, theta, gamma).

    G is the robot base shape in the body frame; the world-frame shape is
    Grot = R G R^T. Uses a Cholesky factorization of the combined shape
    rather than an explicit inverse.
    """
    eg = math.exp(gamma)
    emg = 1.0 / eg
    Grot = rotate_shape(G, theta)
    B = (1.0 + eg) * Grot + (1.0 + emg) * M_m
    d = p - t_m
    w = _shape_solve(B, d)
    r = float(d @ w)
    dG_dtheta = _SKEW @ Grot - Grot @ _SKEW
    grad = np.empty(4)
    grad[0:2] = 2.0 * w
    grad[2] = -(1.0 + eg) * float(w @ dG_dtheta @ w)
    grad[3] = -float(w @ (eg * Grot - emg * M_m) @ w)
    return r, grad


def minkowski_residual(p, G_rot, t_m, M_m, gamma: float) -> float:
    """Over-approximation membership residual for a robot/obstacle pair.

    Arguments take the already-rotated robot shape G_rot. Feasibility in the
    OCP requires the residual to reach 1 plus the safety margin; a value of
    at least 1 for any gamma certifies disjoint interiors. Coincident
    centers return 0 (always infeasible) rather than raising.
    """
    p = np.asarray(p, dtype=float)
    t_m = np.asarray(t_m, dtype=float)
    eg = math.exp(gamma)
    B = (1.0 + eg) * np.asarray(G_rot, float) + (1.0 + 1.0 / eg) * np.asarray(M_m, float)
    d = p - t_m
    return float(d @ _shape_solve(B, d))


def minkowski_jacobian(state, shape: RobotShape, t_m, M_m, gamma: float) -> np.ndarray:
    """Exact gradient of the Minkowski residual over (px, py, theta, gamma)."""
    x = np.asarray(state, dtype=float).reshape(-1)
    _, grad = _minkowski_terms(
        x[0:2], float(x[2]), shape.base_shape, np.asarray(t_m, float),
        np.asarray(M_m, float), float(gamma),
    )
    return grad


def _hyperplane_terms(
    p: np.ndarray,
    theta: float,
    G: np.ndarray,
    t_m: np.ndarray,
    M_m: np.ndarray,
    eta: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Separation residual and gradient over (px, py, theta, eta_x, eta_y)."""
    Grot = rotate_shape(G, theta)
    d = p - t_m
    Me = M_m @ eta
    Ge = Grot @ eta
    sm = math.sqrt(max(float(eta @ Me), 0.0))
    sg = math.sqrt(max(float(eta @ Ge), 0.0))
    sep = float(eta @ d) - sm - sg
    grad = np.zeros(5)
    grad[0:2] = eta
    if sg > 0.0:
        dG_dtheta = _SKEW @ Grot - Grot @ _SKEW
        grad[2] = -float(eta @ dG_dtheta @ eta) / (2.0 * sg)
    grad[3:5] = d
    if sm > 0.0:
        grad[3:5] -= Me / sm
    if sg > 0.0:
        grad[3:5] -= Ge / sg
    return sep, grad


def hyperplane_residuals(p, G_rot, t_m, M_m, eta) -> tuple[float, float]:
    """Separation and norm-slack residuals of the hyperplane formulation.

    separation = eta^T (p - t) - sqrt(eta^T M eta) - sqrt(eta^T Grot eta)
    norm_slack = 1 - eta^T eta

    Feasibility requires separation >= margin and norm_slack >= 0. A zero
    eta yields separation 0; the NLP keeps iterates away from it through a
    floor on eta^T eta.
    """
    p = np.asarray(p, dtype=float)
    t_m = np.asarray(t_m, dtype=float)
    eta = np.asarray(eta, dtype=float)
    M_m = np.asarray(M_m, dtype=float)
    G_rot = np.asarray(G_rot, dtype=float)
    sm = math.sqrt(max(float(eta @ M_m @ eta), 0.0))
    sg = math.sqrt(max(float(eta @ G_rot @ eta), 0.0))
    sep = float(eta @ (p - t_m)) - sm - sg
    return sep, 1.0 - float(eta @ eta)


def hyperplane_jacobian(state, shape: RobotShape, t_m, M_m, eta) -> np.ndarray:
    """Exact gradient of the separation over (px, py, theta, eta_x, eta_y)."""
    x = np.asarray(state, dtype=float).reshape(-1)
    _, grad = _hyperplane_terms(
        x[0:2], float(x[2]), shape.base_shape, np.asarray(t_m, float),
        np.asarray(M_m, float), np.asarray(eta, float).reshape(-1),
    )
    return grad


def tightest_gamma(
    p,
    theta: float,
    shape: RobotShape,
    t_m,
    M_m,
    gamma0: float,
    lo: float,
    hi: float,
    iters: int = 10,
) -> float:
    """Maximize the Minkowski residual over gamma in [lo, hi] for fixed pose.

    Fixed-point iteration on the stationarity condition
    gamma = 0.5 log(w'Mw / w'Gw) with w = B(gamma)^{-1}(p - t); keeps the
    best iterate seen. Used to re-center the over-approximation parameters
    between SQP iterations, where the Gauss-Newton model has no curvature
    information along gamma.
    """
    p = np.asarray(p, dtype=float)
    t_m = np.asarray(t_m, dtype=float)
    d = p - t_m
    if not np.any(d != 0.0):
        return min(max(gamma0, lo), hi)
    Grot = rotate_shape(shape, theta)
    M_m = np.asarray(M_m, dtype=float)

    def residual(g):
        eg = math.exp(g)
        B = (1.0 + eg) * Grot + (1.0 + 1.0 / eg) * M_m
        return float(d @ _shape_solve(B, d))

    gamma = min(max(gamma0, lo), hi)
    best_gamma, best_r = gamma, residual(gamma)
    for _ in range(iters):
        eg = math.exp(gamma)
        B = (1.0 + eg) * Grot + (1.0 + 1.0 / eg) * M_m
        w = _shape_solve(B, d)
        num = float(w @ M_m @ w)
        den = float(w @ Grot @ w)
        if num <= 0.0 or den <= 0.0:
            break
        new = min(max(0.5 * math.log(num / den), lo), hi)
        if abs(new - gamma) < 1e-13:
            gamma = new
            break
        gamma = new
        r = residual(gamma)
        if r > best_r:
            best_gamma, best_r = gamma, r
    r = residual(gamma)
    if r > best_r:
        best_gamma = gamma
    return best_gamma


def fixed_gamma_hat(state_guess, shape: RobotShape, t_m, M_m) -> float:
    """Closed-form over-approximation parameter from a guessed robot state.

    Evaluates gamma_star in the direction from the obstacle center to the
    guessed robot center and clamps it to the admissible interval. Costs a
    few matrix-vector products and one logarithm. Coincident centers fall
    back to gamma = 0 (clamped).
    """
    x = np.asarray(state_guess, dtype=float).reshape(-1)
    t_m = np.asarray(t_m, dtype=float)
    G_rot = rotate_shape(shape, float(x[2]))
    bounds = gamma_bounds(G_rot, M_m)
    eta = x[0:2] - t_m
    if not np.any(eta != 0.0):
        logger.warning("fixed_gamma_hat: coincident centers, falling back to gamma=0")
        return bounds.clamp(0.0)
    return bounds.clamp(gamma_star(eta, G_rot, M_m))


def fixed_eta_hat(robot: Ellipsoid, obstacle: Ellipsoid) -> np.ndarray:
    """Unit separating direction from the shortest vector between the pair.

    Oriented from the obstacle toward the robot, which makes the separation
    residual nonnegative at the guess. Overlapping interiors or a zero
    shortest vector (touching) fall back to the normalized center difference;
    coincident centers fall back to a fixed default direction.
    """
    p_robot, p_obs = _alternating_projection_pair(robot, obstacle)
    v = p_robot - p_obs
    norm_v = float(np.linalg.norm(v))
    if norm_v > 1e-9:
        return v / norm_v
    c = robot.center - obstacle.center
    norm = float(np.linalg.norm(c))
    if norm > 1e-12:
        return c / norm
    logger.warning("fixed_eta_hat: coincident centers, using default direction")
    eta = np.zeros(robot.dim)
    eta[0] = 1.0
    return eta
