import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ellipsoid_mpc.geometry import (
    Ellipsoid,
    GammaInterval,
    beta_from_gamma,
    gamma_bounds,
    gamma_star,
    interiors_overlap,
    overapprox_shape,
    support_value,
)
from ellipsoid_mpc.oracles import (
    overlap_program_value,
    overlap_program_values,
    sampled_minkowski_points,
)

from conftest import random_direction, random_pd_matrix


# Hypothesis strategy: symmetric PD 2x2 built from a rotation and eigenvalues.
@st.composite
def pd_matrices(draw, eig_low=0.05, eig_high=10.0):
    ang = draw(st.floats(0.0, 2.0 * math.pi))
    l1 = draw(st.floats(eig_low, eig_high))
    l2 = draw(st.floats(eig_low, eig_high))
    c, s = math.cos(ang), math.sin(ang)
    q = np.array([[c, -s], [s, c]])
    return q @ np.diag([l1, l2]) @ q.T


directions = st.tuples(
    st.floats(-5.0, 5.0), st.floats(-5.0, 5.0)
).filter(lambda t: abs(t[0]) + abs(t[1]) > 1e-3).map(np.array)


class TestEllipsoid:
    def test_center_is_member(self, rng):
        for _ in range(20):
            e = Ellipsoid(rng.standard_normal(2), random_pd_matrix(rng))
            assert e.contains(e.center)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            Ellipsoid([0, 0], np.array([[1.0, 0.5], [0.2, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="positive definite"):
            Ellipsoid([0, 0], np.diag([1.0, -1.0]))

    def test_immutable_arrays(self):
        e = Ellipsoid([0, 0], np.eye(2))
        with pytest.raises(ValueError):
            e.center[0] = 1.0

    def test_membership_matches_definition(self, rng):
        e = Ellipsoid([1.0, -2.0], np.diag([4.0, 1.0]))
        assert e.contains([3.0, -2.0])          # on boundary along x
        assert not e.contains([3.1, -2.0])
        assert e.contains([1.0, -1.0])


class TestSupportValue:
    def test_unit_circle(self):
        assert support_value([1.0, 0.0], np.eye(2)) == pytest.approx(1.0)

    def test_semi_axis(self):
        assert support_value([0.0, 1.0], np.diag([4.0, 1.0])) == pytest.approx(1.0)

    def test_zero_direction_rejected(self):
        with pytest.raises(ValueError, match="nonzero"):
            support_value([0.0, 0.0], np.eye(2))

    def test_non_pd_rejected(self):
        with pytest.raises(ValueError, match="positive definite"):
            support_value([1.0, 0.0], np.diag([1.0, 0.0]))

    def test_matches_boundary_sampling(self, rng):
        # support = max over boundary points of eta . b
        for _ in range(5):
            M = random_pd_matrix(rng)
            eta = random_direction(rng)
            ang = 2 * np.pi * np.arange(100_000) / 100_000
            u = np.column_stack([np.cos(ang), np.sin(ang)])
            pm = u @ M
            boundary = pm / np.sqrt(np.sum(u * pm, axis=1))[:, None]
            sampled = float(np.max(boundary @ eta))
            assert sampled == pytest.approx(support_value(eta, M), rel=1e-3)

    @settings(max_examples=50, deadline=None)
    @given(pd_matrices(), directions, st.floats(0.1, 10.0))
    def test_positive_homogeneity(self, M, eta, c):
        assert support_value(c * eta, M) == pytest.approx(
            c * support_value(eta, M), rel=1e-12
        )


class TestBetaFromGamma:
    @pytest.mark.parametrize(
        "gamma, expected",
        [
            (0.0, (0.5, 0.5)),
            (math.log(2.0), (1.0 / 3.0, 2.0 / 3.0)),
            (-math.log(2.0), (2.0 / 3.0, 1.0 / 3.0)),
        ],
    )
    def test_known_values(self, gamma, expected):
        b1, b2 = beta_from_gamma(gamma)
        assert b1 == pytest.approx(expected[0], abs=1e-15)
        assert b2 == pytest.approx(expected[1], abs=1e-15)

    # beyond |gamma| ~ 36 one weight rounds to exactly 1.0 in double precision
    @settings(max_examples=100, deadline=None)
    @given(st.floats(-30.0, 30.0))
    def test_sum_to_one_in_open_interval(self, gamma):
        b1, b2 = beta_from_gamma(gamma)
        assert 0.0 < b1 < 1.0 and 0.0 < b2 < 1.0
        assert abs(b1 + b2 - 1.0) <= 1e-15

    def test_antisymmetry(self):
        for g in [0.3, 1.7, 5.0]:
            assert beta_from_gamma(g) == tuple(reversed(beta_from_gamma(-g)))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            beta_from_gamma(float("nan"))


class TestOverapproxShape:
    def test_equal_unit_circles(self):
        np.testing.assert_allclose(
            overapprox_shape(np.eye(2), np.eye(2), 0.0), 4.0 * np.eye(2)
        )

    def test_circle_sum_exact_at_gamma_star(self):
        r1, r2 = 0.7, 1.9
        M = overapprox_shape(
            r1**2 * np.eye(2), r2**2 * np.eye(2), math.log(r2 / r1)
        )
        np.testing.assert_allclose(M, (r1 + r2) ** 2 * np.eye(2), rtol=1e-12)

    def test_matches_beta_form(self, rng):
        M1 = random_pd_matrix(rng)
        M2 = random_pd_matrix(rng)
        for g in [-2.0, 0.0, 1.3]:
            b1, b2 = beta_from_gamma(g)
            np.testing.assert_allclose(
                overapprox_shape(M1, M2, g), M1 / b1 + M2 / b2, rtol=1e-12
            )

    def test_containment_of_sampled_sum(self, rng):
        # Lemma-style containment: every sampled Minkowski-sum point lies
        # inside the over-approximation for every gamma.
        for trial in range(10):
            M1 = random_pd_matrix(rng)
            M2 = random_pd_matrix(rng)
            pts = sampled_minkowski_points(M1, M2, 10_000, seed=trial)
            for g in rng.uniform(-3.0, 3.0, size=5):
                B_inv = np.linalg.inv(overapprox_shape(M1, M2, g))
                q = np.einsum("bi,ij,bj->b", pts, B_inv, pts)
                assert float(q.max()) <= 1.0 + 1e-9

    def test_rejects_non_pd(self):
        with pytest.raises(ValueError):
            overapprox_shape(np.diag([1.0, 0.0]), np.eye(2), 0.0)


class TestGammaStar:
    def test_equal_shapes(self, rng):
        M = random_pd_matrix(rng)
        assert gamma_star(random_direction(rng), M, M) == pytest.approx(0.0, abs=1e-12)

    def test_scaled_identity(self):
        assert gamma_star([0.3, -1.2], np.eye(2), 4.0 * np.eye(2)) == pytest.approx(
            math.log(2.0)
        )

    def test_support_additivity_at_optimum(self, rng):
        for _ in range(50):
            M1, M2 = random_pd_matrix(rng), random_pd_matrix(rng)
            eta = random_direction(rng)
            g = gamma_star(eta, M1, M2)
            tight = support_value(eta, overapprox_shape(M1, M2, g))
            additive = support_value(eta, M1) + support_value(eta, M2)
            assert tight == pytest.approx(additive, rel=1e-10)

    def test_matches_golden_section_minimizer(self, rng):
        # 1-D search oracle over gamma in [-20, 20].
        invphi = (math.sqrt(5.0) - 1.0) / 2.0
        for _ in range(20):
            M1, M2 = random_pd_matrix(rng), random_pd_matrix(rng)
            eta = random_direction(rng)

            def support_of(g):
                return support_value(eta, overapprox_shape(M1, M2, g))

            a, b = -20.0, 20.0
            while b - a > 1e-9:
                c = b - invphi * (b - a)
                d = a + invphi * (b - a)
                if support_of(c) <= support_of(d):
                    b = d
                else:
                    a = c
            assert gamma_star(eta, M1, M2) == pytest.approx(0.5 * (a + b), abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(pd_matrices(), pd_matrices(), directions)
    def test_antisymmetry(self, M1, M2, eta):
        assert gamma_star(eta, M1, M2) == pytest.approx(
            -gamma_star(eta, M2, M1), abs=1e-12
        )

    @settings(max_examples=50, deadline=None)
    @given(pd_matrices(), pd_matrices(), directions, st.floats(0.01, 100.0))
    def test_scale_invariance_in_direction(self, M1, M2, eta, c):
        g0 = gamma_star(eta, M1, M2)
        assert gamma_star(c * eta, M1, M2) == pytest.approx(g0, abs=1e-9)
        assert gamma_star(-eta, M1, M2) == pytest.approx(g0, abs=1e-12)

    def test_midpoint_convexity_of_support(self, rng):
        for _ in range(30):
            M1, M2 = random_pd_matrix(rng), random_pd_matrix(rng)
            eta = random_direction(rng)
            g = np.sort(rng.uniform(-4.0, 4.0, size=2))
            mid = 0.5 * (g[0] + g[1])

            def f(gamma):
                return support_value(eta, overapprox_shape(M1, M2, gamma))

            assert f(mid) <= 0.5 * (f(g[0]) + f(g[1])) + 1e-12


class TestGammaBounds:
    def test_identity_pair(self):
        b = gamma_bounds(np.eye(2), np.eye(2))
        assert b.lower == pytest.approx(0.0) and b.upper == pytest.approx(0.0)

    def test_diagonal_pair(self):
        b = gamma_bounds(np.diag([1.0, 4.0]), np.diag([9.0, 1.0]))
        assert b.lower == pytest.approx(-math.log(2.0))
        assert b.upper == pytest.approx(math.log(3.0))

    def test_contains_gamma_star_for_all_directions(self, rng):
        for _ in range(20):
            M1, M2 = random_pd_matrix(rng), random_pd_matrix(rng)
            b = gamma_bounds(M1, M2)
            for _ in range(500):
                g = gamma_star(random_direction(rng), M1, M2)
                assert b.contains(g, tol=1e-12)

    def test_3d_pair(self, rng):
        M1 = random_pd_matrix(rng, n=3)
        M2 = random_pd_matrix(rng, n=3)
        b = gamma_bounds(M1, M2)
        for _ in range(200):
            g = gamma_star(random_direction(rng, n=3), M1, M2)
            assert b.contains(g, tol=1e-12)

    def test_interval_validation(self):
        with pytest.raises(ValueError):
            GammaInterval(1.0, 0.0)
        assert GammaInterval(-1.0, 2.0).clamp(5.0) == 2.0


class TestInteriorsOverlap:
    def test_touching_circles_disjoint(self):
        e1 = Ellipsoid([0.0, 0.0], np.eye(2))
        e2 = Ellipsoid([2.0, 0.0], np.eye(2))
        assert not interiors_overlap(e1, e2)

    def test_close_circles_overlap(self):
        e1 = Ellipsoid([0.0, 0.0], np.eye(2))
        e2 = Ellipsoid([1.9, 0.0], np.eye(2))
        assert interiors_overlap(e1, e2)

    def test_coincident_centers(self, rng):
        c = rng.standard_normal(2)
        assert interiors_overlap(
            Ellipsoid(c, random_pd_matrix(rng)), Ellipsoid(c, random_pd_matrix(rng))
        )

    def test_agrees_with_convex_program(self, rng):
        firsts, seconds = [], []
        for _ in range(200):
            firsts.append(Ellipsoid(rng.uniform(-2, 2, 2), random_pd_matrix(rng)))
            seconds.append(Ellipsoid(rng.uniform(-2, 2, 2), random_pd_matrix(rng)))
        values = overlap_program_values(firsts, seconds)
        disagreements = 0
        for e1, e2, value in zip(firsts, seconds, values):
            oracle_overlap = value < 1.0 - 1e-9
            if interiors_overlap(e1, e2) != oracle_overlap:
                # allowed only in a tiny tangency band
                assert abs(value - 1.0) <= 1e-6
                disagreements += 1
        assert disagreements <= 2

    def test_symmetry_and_translation_invariance(self, rng):
        for _ in range(25):
            e1 = Ellipsoid(rng.uniform(-2, 2, 2), random_pd_matrix(rng))
            e2 = Ellipsoid(rng.uniform(-2, 2, 2), random_pd_matrix(rng))
            res = interiors_overlap(e1, e2)
            assert res == interiors_overlap(e2, e1)
            shift = rng.standard_normal(2) * 5.0
            assert res == interiors_overlap(
                Ellipsoid(e1.center + shift, e1.shape),
                Ellipsoid(e2.center + shift, e2.shape),
            )
