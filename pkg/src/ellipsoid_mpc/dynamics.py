"""Differential-drive kinematics, RK4 discretization, and exact sensitivities.

State x = (px, py, theta, v, omega), input u = (a, alpha). The continuous
dynamics are xdot = (v cos th, v sin th, omega, a, alpha); discretization is
one classical RK4 step with the input held constant over the interval.
Sensitivities are propagated through the four stages by the chain rule, so
they are exact derivatives of the discrete map rather than approximations.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NX",
    "NU",
    "RobotState",
    "ControlInput",
    "RobotShape",
    "rotation_matrix",
    "rotate_shape",
    "ode_rhs",
    "ode_jacobians",
    "rk4_step",
    "rk4_step_with_sensitivities",
]

NX = 5
NU = 2

# Generator of planar rotations: R'(theta) = SKEW @ R(theta).
_SKEW = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class RobotState:
    """Planar robot state with physical units (m, rad, m/s, rad/s)."""

    px: float
    py: float
    theta: float
    v: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(f) for f in self.as_array()):
            raise ValueError("state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta, self.v, self.omega])

    @classmethod
    def from_array(cls, x) -> "RobotState":
        px, py, theta, v, omega = (float(c) for c in np.asarray(x).reshape(-1))
        return cls(px, py, theta, v, omega)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.px, self.py])


@dataclass(frozen=True)
class ControlInput:
    """Forward and angular acceleration commands (m/s^2, rad/s^2)."""

    a: float
    alpha: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.alpha)):
            raise ValueError("input must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.alpha])

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        a, alpha = (float(c) for c in np.asarray(u).reshape(-1))
        return cls(a, alpha)


@dataclass(frozen=True)
class RobotShape:
    """Body ellipsoid in the robot frame: semi-axes (a_r, b_r) in meters.

    a_r is the semi-axis along the heading, b_r the lateral one. The base
    shape matrix is diag(a_r^2, b_r^2); the world-frame shape at heading
    theta is R(theta) G R(theta)^T (see :func:`rotate_shape`).
    """

    semi_axes: tuple[float, float]

    def __post_init__(self):
        a_r, b_r = self.semi_axes
        if not (a_r > 0.0 and b_r > 0.0):
            raise ValueError("semi-axes must be positive")
        object.__setattr__(self, "semi_axes", (float(a_r), float(b_r)))

    @classmethod
    def from_axis_lengths(cls, length: float, width: float) -> "RobotShape":
        """Build from full axis lengths (twice the semi-axes)."""
        return cls((0.5 * length, 0.5 * width))

    @property
    def base_shape(self) -> np.ndarray:
        a_r, b_r = self.semi_axes
        return np.diag([a_r * a_r, b_r * b_r])

    @property
    def width(self) -> float:
        """Full lateral extent of the body at zero tilt."""
        return 2.0 * self.semi_axes[1]


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_shape(shape, theta: float) -> np.ndarray:
    """World-frame shape matrix R(theta) G R(theta)^T.

    Accepts a :class:`RobotShape` or a raw 2x2 base matrix. A similarity
    transform, so eigenvalues, trace and determinant are preserved.
    """
    G = shape.base_shape if isinstance(shape, RobotShape) else np.asarray(shape, float)
    R = rotation_matrix(theta)
    return R @ G @ R.T


def ode_rhs(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Continuous-time equations of motion."""
    _, _, theta, v, omega = x
    return np.array([v * math.cos(theta), v * math.sin(theta), omega, u[0], u[1]])


def ode_jacobians(x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (df/dx, df/du) of :func:`ode_rhs`."""
    theta, v = x[2], x[3]
    c, s = math.cos(theta), math.sin(theta)
    A = np.zeros((NX, NX))
    A[0, 2] = -v * s
    A[0, 3] = c
    A[1, 2] = v * c
    A[1, 3] = s
    A[2, 4] = 1.0
    B = np.zeros((NX, NU))
    B[3, 0] = 1.0
    B[4, 1] = 1.0
    return A, B


def rk4_step(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One classical RK4 step with zero-order-hold input."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = ode_rhs(x, u)
    k2 = ode_rhs(x + 0.5 * dt * k1, u)
    k3 = ode_rhs(x + 0.5 * dt * k2, u)
    k4 = ode_rhs(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_with_sensitivities(
    x: np.ndarray, u: np.ndarray, dt: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 step together with exact sensitivities d x^+ / dx and d x^+ / du.

    The chain rule is applied through the four stages, so the returned
    matrices are the true Jacobians of the discrete-time map.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    eye = np.eye(NX)

    k1 = ode_rhs(x, u)
    A1, B1 = ode_jacobians(x, u)
    k1_x, k1_u = A1, B1

    x2 = x + 0.5 * dt * k1
    k2 = ode_rhs(x2, u)
    A2, B2 = ode_jacobians(x2, u)
    k2_x = A2 @ (eye + 0.5 * dt * k1_x)
    k2_u = A2 @ (0.5 * dt * k1_u) + B2

    x3 = x + 0.5 * dt * k2
    k3 = ode_rhs(x3, u)
    A3, B3 = ode_jacobians(x3, u)
    k3_x = A3 @ (eye + 0.5 * dt * k2_x)
    k3_u = A3 @ (0.5 * dt * k2_u) + B3

    x4 = x + dt * k3
    k4 = ode_rhs(x4, u)
    A4, B4 = ode_jacobians(x4, u)
    k4_x = A4 @ (eye + dt * k3_x)
    k4_u = A4 @ (dt * k3_u) + B4

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    sens_x = eye + (dt / 6.0) * (k1_x + 2.0 * k2_x + 2.0 * k3_x + k4_x)
    sens_u = (dt / 6.0) * (k1_u + 2.0 * k2_u + 2.0 * k3_u + k4_u)
    return x_next, sens_x, sens_u
