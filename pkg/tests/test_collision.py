import math

import numpy as np
import pytest

from ellipsoid_mpc.collision import (
    ConstraintKind,
    ConstraintMode,
    ObstacleSet,
    fixed_eta_hat,
    fixed_gamma_hat,
    hyperplane_jacobian,
    hyperplane_residuals,
    minkowski_jacobian,
    minkowski_residual,
)
from ellipsoid_mpc.dynamics import RobotShape, rotate_shape, rotation_matrix
from ellipsoid_mpc.geometry import Ellipsoid, gamma_bounds, gamma_star, interiors_overlap
from ellipsoid_mpc.oracles import finite_difference_jacobian

from conftest import random_pd_matrix


def _random_config(rng, min_gap=0.0):
    shape = RobotShape((rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)))
    state = np.array([*rng.uniform(-3, 3, 2), rng.uniform(-math.pi, math.pi), 0.0, 0.0])
    t_m = rng.uniform(-3, 3, 2)
    M_m = random_pd_matrix(rng)
    return shape, state, t_m, M_m


class TestConstraintMode:
    def test_rejects_negative_margin(self):
        with pytest.raises(ValueError):
            ConstraintMode(ConstraintKind.MINKOWSKI_FREE_GAMMA, -0.1)

    def test_kind_flags(self):
        assert ConstraintKind.MINKOWSKI_FIXED_GAMMA.is_fixed
        assert ConstraintKind.MINKOWSKI_FIXED_GAMMA.is_minkowski
        assert not ConstraintKind.HYPERPLANE_FREE_ETA.is_minkowski


class TestObstacleSet:
    def test_gamma_boxes_constant_under_rotation(self, rng):
        shape = RobotShape((0.35, 0.2))
        obs = ObstacleSet((Ellipsoid(rng.uniform(-1, 1, 2), random_pd_matrix(rng)),))
        boxes = obs.gamma_boxes(shape)
        for theta in rng.uniform(-3, 3, 5):
            b = gamma_bounds(rotate_shape(shape, theta), obs[0].shape)
            assert boxes[0].lower == pytest.approx(max(b.lower, -20.0), abs=1e-10)
            assert boxes[0].upper == pytest.approx(min(b.upper, 20.0), abs=1e-10)


class TestMinkowskiResidual:
    def test_touching_equal_circles(self):
        r = minkowski_residual([2.0, 0.0], np.eye(2), [0.0, 0.0], np.eye(2), 0.0)
        assert r == pytest.approx(1.0)

    def test_circle_pair_tight_at_gamma_star(self):
        # r1 = 1, r2 = 2, centers 3 apart: exactly touching at gamma = ln 2
        r = minkowski_residual(
            [3.0, 0.0], np.eye(2), [0.0, 0.0], 4.0 * np.eye(2), math.log(2.0)
        )
        assert r == pytest.approx(1.0)

    def test_coincident_centers_give_zero(self):
        assert minkowski_residual([1.0, 1.0], np.eye(2), [1.0, 1.0], np.eye(2), 0.3) == 0.0

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(100):
            shape, state, t_m, M_m = _random_config(rng)
            gamma = float(rng.uniform(-2, 2))
            grad = minkowski_jacobian(state, shape, t_m, M_m, gamma)

            def f(z):
                g_rot = rotate_shape(shape, z[2])
                return minkowski_residual(z[0:2], g_rot, t_m, M_m, z[3])

            z0 = np.array([state[0], state[1], state[2], gamma])
            fd = finite_difference_jacobian(f, z0).ravel()
            scale = max(1.0, float(np.abs(fd).max()))
            assert float(np.abs(grad - fd).max()) <= 1e-6 * scale

    def test_theta_gradient_zero_for_circular_robot(self, rng):
        shape = RobotShape((0.5, 0.5))
        for _ in range(10):
            state = np.array([*rng.uniform(-2, 2, 2), rng.uniform(-3, 3), 0, 0])
            grad = minkowski_jacobian(state, shape, rng.uniform(-2, 2, 2),
                                      random_pd_matrix(rng), rng.uniform(-1, 1))
            assert grad[2] == pytest.approx(0.0, abs=1e-14)

    def test_gamma_stationarity_at_scalar_optimum(self, rng):
        # the derivative in gamma vanishes at the argmax of the 1-D problem
        for _ in range(20):
            shape, state, t_m, M_m = _random_config(rng)
            gammas = np.linspace(-6, 6, 4001)
            G_rot = rotate_shape(shape, state[2])
            vals = [minkowski_residual(state[0:2], G_rot, t_m, M_m, g) for g in gammas]
            g_best = gammas[int(np.argmax(vals))]
            grad = minkowski_jacobian(state, shape, t_m, M_m, g_best)
            # coarse grid: derivative small, scaled by the local curvature step
            assert abs(grad[3]) <= 2e-2 * max(1.0, np.max(vals))

    def test_gamma_stationarity_exact_for_circles(self, rng):
        shape = RobotShape((0.5, 0.5))
        for _ in range(10):
            state = np.array([*rng.uniform(-2, 2, 2), 0.4, 0, 0])
            t_m = rng.uniform(-2, 2, 2)
            if np.allclose(state[:2], t_m):
                continue
            r_obs = rng.uniform(0.3, 2.0)
            M_m = r_obs**2 * np.eye(2)
            g_hat = gamma_star(state[0:2] - t_m, rotate_shape(shape, state[2]), M_m)
            grad = minkowski_jacobian(state, shape, t_m, M_m, g_hat)
            assert grad[3] == pytest.approx(0.0, abs=1e-12)

    def test_invariant_under_joint_rototranslation(self, rng):
        for _ in range(20):
            shape, state, t_m, M_m = _random_config(rng)
            gamma = float(rng.uniform(-1, 1))
            r0 = minkowski_residual(
                state[0:2], rotate_shape(shape, state[2]), t_m, M_m, gamma
            )
            phi = float(rng.uniform(-3, 3))
            tau = rng.standard_normal(2)
            R = rotation_matrix(phi)
            r1 = minkowski_residual(
                R @ state[0:2] + tau,
                rotate_shape(shape, state[2] + phi),
                R @ t_m + tau,
                R @ M_m @ R.T,
                gamma,
            )
            assert r1 == pytest.approx(r0, rel=1e-10)

    def test_soundness_of_any_fixed_gamma(self, rng):
        # residual >= 1 at any gamma implies disjoint interiors
        checked = 0
        for _ in range(300):
            shape, state, t_m, M_m = _random_config(rng)
            gamma = float(rng.uniform(-3, 3))
            G_rot = rotate_shape(shape, state[2])
            r = minkowski_residual(state[0:2], G_rot, t_m, M_m, gamma)
            if r >= 1.0:
                robot = Ellipsoid(state[0:2], G_rot)
                assert not interiors_overlap(robot, Ellipsoid(t_m, M_m))
                checked += 1
        assert checked > 50


class TestHyperplaneResiduals:
    def test_tangent_circles_unit_normal(self):
        sep, slack = hyperplane_residuals(
            [2.0, 0.0], np.eye(2), [0.0, 0.0], np.eye(2), [1.0, 0.0]
        )
        assert sep == pytest.approx(0.0)
        assert slack == pytest.approx(0.0)

    def test_gap_of_two(self):
        sep, _ = hyperplane_residuals(
            [4.0, 0.0], np.eye(2), [0.0, 0.0], np.eye(2), [1.0, 0.0]
        )
        assert sep == pytest.approx(2.0)

    def test_zero_eta_returns_zero_separation(self):
        sep, slack = hyperplane_residuals(
            [4.0, 0.0], np.eye(2), [0.0, 0.0], np.eye(2), [0.0, 0.0]
        )
        assert sep == 0.0 and slack == 1.0

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(100):
            shape, state, t_m, M_m = _random_config(rng)
            eta = rng.uniform(-1, 1, 2)
            if np.linalg.norm(eta) < 0.1:
                eta = np.array([0.5, 0.5])
            grad = hyperplane_jacobian(state, shape, t_m, M_m, eta)

            def f(z):
                return hyperplane_residuals(
                    z[0:2], rotate_shape(shape, z[2]), t_m, M_m, z[3:5]
                )[0]

            z0 = np.array([state[0], state[1], state[2], eta[0], eta[1]])
            fd = finite_difference_jacobian(f, z0).ravel()
            scale = max(1.0, float(np.abs(fd).max()))
            assert float(np.abs(grad - fd).max()) <= 1e-6 * scale

    def test_soundness(self, rng):
        # nonnegative separation with a nonzero eta implies disjoint interiors
        checked = 0
        for _ in range(300):
            shape, state, t_m, M_m = _random_config(rng)
            eta = rng.uniform(-1, 1, 2)
            if np.linalg.norm(eta) < 1e-6:
                continue
            G_rot = rotate_shape(shape, state[2])
            sep, _ = hyperplane_residuals(state[0:2], G_rot, t_m, M_m, eta)
            if sep >= 0.0:
                assert not interiors_overlap(
                    Ellipsoid(state[0:2], G_rot), Ellipsoid(t_m, M_m)
                )
                checked += 1
        assert checked > 30


class TestFixedGammaHat:
    def test_circle_ratio(self, rng):
        shape = RobotShape((1.0, 1.0))
        for _ in range(5):
            state = np.array([*rng.uniform(1, 3, 2), rng.uniform(-3, 3), 0, 0])
            got = fixed_gamma_hat(state, shape, [-2.0, -2.0], 4.0 * np.eye(2))
            assert got == pytest.approx(math.log(2.0), abs=1e-12)

    def test_identical_shapes_give_zero(self, rng):
        shape = RobotShape((0.6, 0.3))
        state = np.array([2.0, 0.5, 0.7, 0, 0])
        M_m = rotate_shape(shape, 0.7)
        assert fixed_gamma_hat(state, shape, [0.0, 0.0], M_m) == pytest.approx(0.0, abs=1e-12)

    def test_matches_gamma_star(self, rng):
        for _ in range(50):
            shape, state, t_m, M_m = _random_config(rng)
            if np.linalg.norm(state[0:2] - t_m) < 1e-6:
                continue
            G_rot = rotate_shape(shape, state[2])
            expected = gamma_bounds(G_rot, M_m).clamp(
                gamma_star(state[0:2] - t_m, G_rot, M_m)
            )
            assert fixed_gamma_hat(state, shape, t_m, M_m) == pytest.approx(
                expected, abs=1e-12
            )

    def test_always_within_bounds(self, rng):
        for _ in range(50):
            shape, state, t_m, M_m = _random_config(rng)
            g_hat = fixed_gamma_hat(state, shape, t_m, M_m)
            bounds = gamma_bounds(rotate_shape(shape, state[2]), M_m)
            assert bounds.contains(g_hat, tol=1e-14)

    def test_coincident_centers_fallback(self):
        shape = RobotShape((0.5, 0.5))
        state = np.array([1.0, 1.0, 0.0, 0, 0])
        got = fixed_gamma_hat(state, shape, [1.0, 1.0], np.eye(2))
        assert got == gamma_bounds(np.eye(2) * 0.25, np.eye(2)).clamp(0.0)


class TestFixedEtaHat:
    def test_collinear_circles(self):
        robot = Ellipsoid([0.0, 0.0], np.eye(2))
        obstacle = Ellipsoid([3.0, 0.0], np.eye(2))
        np.testing.assert_allclose(fixed_eta_hat(robot, obstacle), [-1.0, 0.0], atol=1e-9)

    def test_overlapping_fallback_is_center_difference(self):
        robot = Ellipsoid([1.0, 0.0], np.eye(2))
        obstacle = Ellipsoid([0.0, 0.0], np.eye(2))
        np.testing.assert_allclose(fixed_eta_hat(robot, obstacle), [1.0, 0.0])

    def test_coincident_centers_default(self):
        robot = Ellipsoid([0.0, 0.0], np.eye(2))
        obstacle = Ellipsoid([0.0, 0.0], 4.0 * np.eye(2))
        np.testing.assert_allclose(fixed_eta_hat(robot, obstacle), [1.0, 0.0])

    def test_separation_nonnegative_at_eta_hat(self, rng):
        # the distance oracle direction is a valid separator
        for _ in range(40):
            shape = RobotShape((rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6)))
            theta = float(rng.uniform(-3, 3))
            p = rng.uniform(-1, 0, 2)
            t_m = rng.uniform(1.5, 3, 2)
            M_m = 0.5 * random_pd_matrix(rng)
            G_rot = rotate_shape(shape, theta)
            robot = Ellipsoid(p, G_rot)
            obstacle = Ellipsoid(t_m, M_m)
            if interiors_overlap(robot, obstacle):
                continue
            eta = fixed_eta_hat(robot, obstacle)
            sep, _ = hyperplane_residuals(p, G_rot, t_m, M_m, eta)
            assert sep >= -1e-8


class TestOptimalityDominance:
    def test_max_over_gamma_dominates_gamma_hat(self, rng):
        for _ in range(30):
            shape, state, t_m, M_m = _random_config(rng)
            if np.linalg.norm(state[0:2] - t_m) < 1e-6:
                continue
            G_rot = rotate_shape(shape, state[2])
            g_hat = fixed_gamma_hat(state, shape, t_m, M_m)
            r_hat = minkowski_residual(state[0:2], G_rot, t_m, M_m, g_hat)
            grid = np.append(np.linspace(-8, 8, 2001), g_hat)
            r_max = max(
                minkowski_residual(state[0:2], G_rot, t_m, M_m, g) for g in grid
            )
            assert r_max >= r_hat - 1e-12
            # and the grid search may strictly improve on the heuristic
            assert r_max == max(r_max, r_hat)

    def test_gamma_hat_dominates_zero_for_circles(self, rng):
        # for circular shapes gamma_hat is the exact argmax of the residual
        for _ in range(20):
            r_rob, r_obs = rng.uniform(0.3, 1.5, 2)
            shape = RobotShape((r_rob, r_rob))
            state = np.array([*rng.uniform(1, 3, 2), 0.0, 0, 0])
            t_m = rng.uniform(-3, -1, 2)
            M_m = r_obs**2 * np.eye(2)
            G_rot = rotate_shape(shape, 0.0)
            g_hat = fixed_gamma_hat(state, shape, t_m, M_m)
            r_hat = minkowski_residual(state[0:2], G_rot, t_m, M_m, g_hat)
            r_zero = minkowski_residual(state[0:2], G_rot, t_m, M_m, 0.0)
            assert r_hat >= r_zero - 1e-12
