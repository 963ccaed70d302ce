"""Dimension-generic ellipsoid calculus.

Supporting functions, parametric over-approximations of Minkowski sums of
ellipsoids, the tightness-optimal mixing parameter and its bounds, and an
interior-overlap test built on top of the over-approximation family.

An ellipsoid is the set E(t, M) = {tau : (tau - t)^T M^{-1} (tau - t) <= 1}
with center t and symmetric positive-definite shape matrix M. The Minkowski
sum E(0, M1) + E(0, M2) is not an ellipsoid in general, but for any scalar
gamma the ellipsoid with shape

    B(gamma) = (1 + exp(gamma)) * M1 + (1 + exp(-gamma)) * M2

contains it, and the bound is tight in any prescribed direction for the right
choice of gamma. All functions here are pure and safe to call concurrently.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Ellipsoid",
    "GammaInterval",
    "support_value",
    "beta_from_gamma",
    "overapprox_shape",
    "gamma_star",
    "gamma_bounds",
    "interiors_overlap",
]

_SYM_RTOL = 1e-12
# exp() overflows just above 709; reject earlier to keep results finite.
_GAMMA_LIMIT = 700.0


def _check_shape_matrix(M, name: str = "shape matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} must be finite")
    scale = max(1.0, float(np.abs(M).max()))
    if float(np.abs(M - M.T).max()) > _SYM_RTOL * scale:
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return M


def _check_direction(eta, n: int | None = None) -> np.ndarray:
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if not np.all(np.isfinite(eta)):
        raise ValueError("direction must be finite")
    if not np.any(eta != 0.0):
        raise ValueError("direction must be nonzero")
    if n is not None and eta.size != n:
        raise ValueError(f"direction has length {eta.size}, expected {n}")
    return eta


def _check_gamma(gamma) -> float:
    g = float(gamma)
    if not math.isfinite(g):
        raise ValueError("gamma must be finite")
    if abs(g) > _GAMMA_LIMIT:
        raise ValueError(f"gamma = {g} exceeds the numeric range |gamma| <= {_GAMMA_LIMIT}")
    return g


def _eig_range(M: np.ndarray) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric matrix.

    Closed form for 2x2; symmetric eigen-decomposition otherwise.
    """
    if M.shape[0] == 2:
        a, b, c = float(M[0, 0]), float(M[0, 1]), float(M[1, 1])
        mean = 0.5 * (a + c)
        radius = math.hypot(0.5 * (a - c), b)
        return mean - radius, mean + radius
    w = np.linalg.eigvalsh(M)
    return float(w[0]), float(w[-1])


@dataclass(frozen=True)
class Ellipsoid:
    """An ellipsoid E(t, M) given by center ``t`` and PD shape matrix ``M``.

    The same type models the robot body, the obstacles, and over-approximation
    results. Instances are immutable; the stored arrays are read-only copies.
    """

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        center = np.array(self.center, dtype=float).reshape(-1)
        if not np.all(np.isfinite(center)):
            raise ValueError("center must be finite")
        shape = _check_shape_matrix(self.shape)
        if center.size != shape.shape[0]:
            raise ValueError(
                f"center length {center.size} does not match shape matrix {shape.shape}"
            )
        shape = 0.5 * (shape + shape.T)
        center.flags.writeable = False
        shape.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.center.size

    def quadform(self, point) -> float:
        """(point - t)^T M^{-1} (point - t), the membership quadratic form."""
        d = np.asarray(point, dtype=float).reshape(-1) - self.center
        return float(d @ np.linalg.solve(self.shape, d))

    def contains(self, point, tol: float = 0.0) -> bool:
        return self.quadform(point) <= 1.0 + tol

    def support_point(self, eta) -> np.ndarray:
        """Boundary point maximizing eta^T x over the ellipsoid."""
        eta = _check_direction(eta, self.dim)
        Me = self.shape @ eta
        return self.center + Me / math.sqrt(float(eta @ Me))


@dataclass(frozen=True)
class GammaInterval:
    """Closed interval of admissible over-approximation parameters."""

    lower: float
    upper: float

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError("gamma interval must be finite")
        if self.lower > self.upper:
            raise ValueError(f"empty interval [{self.lower}, {self.upper}]")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def clamp(self, gamma: float) -> float:
        return min(max(float(gamma), self.lower), self.upper)

    def contains(self, gamma: float, tol: float = 0.0) -> bool:
        return self.lower - tol <= gamma <= self.upper + tol


def support_value(eta, M) -> float:
    """Supporting function of the centered ellipsoid E(0, M): sqrt(eta^T M eta).

    Positively homogeneous of degree one in ``eta``.
    """
    M = _check_shape_matrix(M)
    eta = _check_direction(eta, M.shape[0])
    return math.sqrt(float(eta @ M @ eta))


def beta_from_gamma(gamma) -> tuple[float, float]:
    """Convex weights (beta1, beta2) = (1/(1+e^g), 1/(1+e^-g)).

    Both lie in (0, 1) and sum to one for every finite gamma, which makes
    gamma an unconstrained reparameterization of the weight pair.
    """
    g = _check_gamma(gamma)
    if g >= 0.0:
        e = math.exp(-g)
        return e / (1.0 + e), 1.0 / (1.0 + e)
    e = math.exp(g)
    return 1.0 / (1.0 + e), e / (1.0 + e)


def _overapprox_shape_unchecked(M1: np.ndarray, M2: np.ndarray, gamma: float) -> np.ndarray:
    eg = math.exp(gamma)
    return (1.0 + eg) * M1 + (1.0 + 1.0 / eg) * M2


def overapprox_shape(M1, M2, gamma) -> np.ndarray:
    """Shape matrix (1+e^g) M1 + (1+e^-g) M2 bounding E(0,M1) + E(0,M2).

    Equals M1/beta1 + M2/beta2 for the weights of :func:`beta_from_gamma`;
    the result is positive definite and contains the Minkowski sum for every
    finite gamma.
    """
    M1 = _check_shape_matrix(M1, "M1")
    M2 = _check_shape_matrix(M2, "M2")
    if M1.shape != M2.shape:
        raise ValueError("shape matrices must have equal dimensions")
    g = _check_gamma(gamma)
    return _overapprox_shape_unchecked(M1, M2, g)


def gamma_star(eta, M1, M2) -> float:
    """Parameter minimizing the over-approximation's support in direction eta.

    Closed form 0.5 * log(eta^T M2 eta / eta^T M1 eta). At this value the
    over-approximation is tight: its support in direction eta equals
    support_value(eta, M1) + support_value(eta, M2).
    """
    M1 = _check_shape_matrix(M1, "M1")
    M2 = _check_shape_matrix(M2, "M2")
    eta = _check_direction(eta, M1.shape[0])
    q1 = float(eta @ M1 @ eta)
    q2 = float(eta @ M2 @ eta)
    return 0.5 * math.log(q2 / q1)


def gamma_bounds(M1, M2) -> GammaInterval:
    """Eigenvalue-ratio interval containing gamma_star for every direction.

    [0.5 log(lmin(M2)/lmax(M1)), 0.5 log(lmax(M2)/lmin(M1))]. Boxing the
    optimization variable to this interval costs no tightness and keeps the
    exponentials well-scaled inside a solver.
    """
    M1 = _check_shape_matrix(M1, "M1")
    M2 = _check_shape_matrix(M2, "M2")
    lo1, hi1 = _eig_range(M1)
    lo2, hi2 = _eig_range(M2)
    return GammaInterval(0.5 * math.log(lo2 / hi1), 0.5 * math.log(hi2 / lo1))


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    """Golden-section maximum of f on [lo, hi] to interval width tol."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return max(fc, fd)


def interiors_overlap(e1: Ellipsoid, e2: Ellipsoid, grid_points: int = 64) -> bool:
    """Whether the open interiors of two ellipsoids intersect.

    The interiors are disjoint iff the center difference d = t1 - t2 lies
    outside the interior of the Minkowski sum of the centered ellipsoids,
    which holds iff max over gamma of d^T B(gamma)^{-1} d >= 1. The maximum
    is bracketed on a coarse grid over :func:`gamma_bounds` and refined by
    golden-section search; touching counts as disjoint interiors.
    """
    if e1.dim != e2.dim:
        raise ValueError("ellipsoids must share a dimension")
    d = e1.center - e2.center
    if not np.any(d != 0.0):
        return True
    M1, M2 = e1.shape, e2.shape

    def residual(g: float) -> float:
        B = _overapprox_shape_unchecked(M1, M2, g)
        return float(d @ np.linalg.solve(B, d))

    bounds = gamma_bounds(M1, M2)
    if bounds.width <= 1e-14:
        return residual(0.5 * (bounds.lower + bounds.upper)) < 1.0

    grid = np.linspace(bounds.lower, bounds.upper, grid_points)
    values = [residual(g) for g in grid]
    best = int(np.argmax(values))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, grid_points - 1)]
    peak = max(values[best], _golden_max(residual, lo, hi, 1e-10))
    return peak < 1.0
