"""Independent reference implementations used to validate the fast paths.

Everything in this module trades speed for transparency: Minkowski sums are
sampled point-by-point, distances come from alternating projections, overlap
decisions from a projected-gradient convex program, and derivatives from
central finite differences. The test-suite checks the production code against
these routines; nothing here is used on the control path.
"""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Ellipsoid, _check_shape_matrix, interiors_overlap

__all__ = [
    "OracleConfig",
    "OverlappingEllipsoidsError",
    "sampled_minkowski_points",
    "ellipsoid_pair_distance",
    "finite_difference_jacobian",
    "overlap_program_value",
    "overlap_program_values",
]


class OverlappingEllipsoidsError(ValueError):
    """Raised when a distance query is made for overlapping interiors."""


@dataclass(frozen=True)
class OracleConfig:
    """Sampling budget shared by the brute-force checks."""

    sample_count: int = 10_000
    tolerance: float = 1e-9
    rng_seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1_000:
            raise ValueError("sample_count must be at least 1000")
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")


def _unit_directions(n: int, count: int, seed: int) -> np.ndarray:
    """Deterministic unit directions: uniform angles in 2-D, seeded otherwise."""
    if n == 2:
        ang = 2.0 * math.pi * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((count, n))
    norms = np.linalg.norm(u, axis=1)
    norms[norms == 0.0] = 1.0
    return u / norms[:, None]


def sampled_minkowski_points(M1, M2, count: int, seed: int = 0) -> np.ndarray:
    """Points of E(0,M1) + E(0,M2) built from boundary pairs.

    For each sampled direction u the pair (b, d) of boundary points of the
    two ellipsoids supporting u is summed, so every returned point belongs to
    the Minkowski sum by construction and the maximum of eta^T (b + d) over
    the returned points converges to the sum's supporting function.
    """
    M1 = _check_shape_matrix(np.asarray(M1, float), "M1")
    M2 = _check_shape_matrix(np.asarray(M2, float), "M2")
    if count < 1:
        raise ValueError("count must be positive")
    U = _unit_directions(M1.shape[0], count, seed)
    P1 = U @ M1
    P2 = U @ M2
    b = P1 / np.sqrt(np.sum(U * P1, axis=1))[:, None]
    d = P2 / np.sqrt(np.sum(U * P2, axis=1))[:, None]
    return b + d


def _eig_batch(shapes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lam, vec = np.linalg.eigh(shapes)
    return lam, vec


def _project_points(points, centers, lam, vec, iters: int = 64) -> np.ndarray:
    """Euclidean projection of each row of ``points`` onto its own ellipsoid.

    The ellipsoids are given by eigen-decompositions shape = V diag(lam) V^T.
    Solves the secular equation sum w_i^2 lam_i / (lam_i + mu)^2 = 1 for the
    points outside; bisection is deliberate (branch-free and vectorizable).
    """
    w = np.einsum("bji,bj->bi", vec, points - centers)
    q = np.sum(w * w / lam, axis=1)
    outside = q > 1.0
    proj = np.array(points, dtype=float)
    if not np.any(outside):
        return proj
    wo = w[outside]
    lo_ = lam[outside]
    mu_lo = np.zeros(wo.shape[0])
    mu_hi = np.sqrt(np.sum(wo * wo * lo_, axis=1))
    for _ in range(iters):
        mu = 0.5 * (mu_lo + mu_hi)
        val = np.sum(wo * wo * lo_ / (lo_ + mu[:, None]) ** 2, axis=1)
        too_far = val < 1.0
        mu_hi = np.where(too_far, mu, mu_hi)
        mu_lo = np.where(too_far, mu_lo, mu)
    mu = 0.5 * (mu_lo + mu_hi)
    z = wo * lo_ / (lo_ + mu[:, None])
    proj[outside] = centers[outside] + np.einsum("bij,bj->bi", vec[outside], z)
    return proj


def _project_single(point: np.ndarray, ell: Ellipsoid, lam, vec) -> np.ndarray:
    return _project_points(point[None, :], ell.center[None, :], lam[None, :], vec[None, :, :])[0]


def _alternating_projection_pair(
    e1: Ellipsoid, e2: Ellipsoid, tol: float = 1e-10, max_iters: int = 10_000
) -> tuple[np.ndarray, np.ndarray]:
    """Alternating projections between two ellipsoids, no overlap pre-check.

    For disjoint interiors the pair converges to the closest points; for
    intersecting sets both points converge to a common point.
    """
    lam1, vec1 = _eig_batch(e1.shape[None, :, :])
    lam2, vec2 = _eig_batch(e2.shape[None, :, :])
    lam1, vec1, lam2, vec2 = lam1[0], vec1[0], lam2[0], vec2[0]
    p = e1.center.copy()
    q = _project_single(p, e2, lam2, vec2)
    for _ in range(max_iters):
        p_new = _project_single(q, e1, lam1, vec1)
        q_new = _project_single(p_new, e2, lam2, vec2)
        step = max(
            float(np.linalg.norm(p_new - p)), float(np.linalg.norm(q_new - q))
        )
        p, q = p_new, q_new
        if step < tol:
            break
    return p, q


def ellipsoid_pair_distance(
    e1: Ellipsoid, e2: Ellipsoid, tol: float = 1e-10, max_iters: int = 10_000
) -> tuple[float, np.ndarray, np.ndarray]:
    """Shortest distance between two non-overlapping ellipsoids.

    Alternating projections between the two convex sets; converges for
    disjoint (possibly touching) interiors. Returns (distance, p1, p2) with
    p1 on/in e1 and p2 on/in e2 realizing the minimum.

    Raises OverlappingEllipsoidsError when the interiors intersect.
    """
    if interiors_overlap(e1, e2):
        raise OverlappingEllipsoidsError("interiors overlap; distance undefined")
    p, q = _alternating_projection_pair(e1, e2, tol, max_iters)
    return float(np.linalg.norm(p - q)), p, q


def finite_difference_jacobian(f, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function at x.

    Entry (i, j) approximates df_i/dx_j with step h; the workhorse oracle for
    every analytic derivative in the package.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fp = np.atleast_1d(np.asarray(f(x + e), dtype=float))
        fm = np.atleast_1d(np.asarray(f(x - e), dtype=float))
        J[:, j] = (fp - fm) / (2.0 * h)
    return J


def overlap_program_values(
    ellipsoids1: list[Ellipsoid], ellipsoids2: list[Ellipsoid], iterations: int = 2000
) -> np.ndarray:
    """Optimal values of min_{z in E2} (z - t1)^T M1^{-1} (z - t1), batched.

    Projected gradient with the conservative step 1/L, L = 2/lmin(M1); the
    interiors overlap exactly when the optimum is below one. Deterministic:
    starts from the centers of the second ellipsoids.
    """
    if len(ellipsoids1) != len(ellipsoids2):
        raise ValueError("pair lists must have equal length")
    if not ellipsoids1:
        return np.zeros(0)
    t1 = np.stack([e.center for e in ellipsoids1])
    m1 = np.stack([e.shape for e in ellipsoids1])
    t2 = np.stack([e.center for e in ellipsoids2])
    m2 = np.stack([e.shape for e in ellipsoids2])
    m1_inv = np.linalg.inv(m1)
    lam1 = np.linalg.eigvalsh(m1)
    lam2, vec2 = _eig_batch(m2)
    step = (lam1[:, 0] / 2.0)[:, None]
    z = t2.copy()
    for _ in range(iterations):
        grad = 2.0 * np.einsum("bij,bj->bi", m1_inv, z - t1)
        z = _project_points(z - step * grad, t2, lam2, vec2)
    diff = z - t1
    return np.einsum("bi,bij,bj->b", diff, m1_inv, diff)


def overlap_program_value(e1: Ellipsoid, e2: Ellipsoid, iterations: int = 2000) -> float:
    """Single-pair convenience wrapper around :func:`overlap_program_values`."""
    return float(overlap_program_values([e1], [e2], iterations)[0])
