import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ellipsoid_mpc.dynamics import (
    ControlInput,
    RobotShape,
    RobotState,
    ode_jacobians,
    ode_rhs,
    rk4_step,
    rk4_step_with_sensitivities,
    rotate_shape,
)
from ellipsoid_mpc.oracles import finite_difference_jacobian


class TestTypes:
    def test_state_roundtrip(self):
        x = RobotState(1.0, 2.0, 0.3, 0.5, -0.1)
        assert RobotState.from_array(x.as_array()) == x

    def test_state_rejects_nan(self):
        with pytest.raises(ValueError):
            RobotState(float("nan"), 0.0, 0.0)

    def test_input_roundtrip(self):
        u = ControlInput(0.4, -1.2)
        np.testing.assert_array_equal(u.as_array(), [0.4, -1.2])

    def test_shape_from_axis_lengths(self):
        shape = RobotShape.from_axis_lengths(0.4, 0.7)
        assert shape.semi_axes == (0.2, 0.35)
        np.testing.assert_allclose(shape.base_shape, np.diag([0.04, 0.1225]))
        assert shape.width == pytest.approx(0.7)

    def test_shape_rejects_degenerate(self):
        with pytest.raises(ValueError):
            RobotShape((0.0, 1.0))


class TestOdeRhs:
    def test_straight_motion(self):
        np.testing.assert_allclose(
            ode_rhs(np.array([0, 0, 0, 1, 0.0]), np.zeros(2)), [1, 0, 0, 0, 0]
        )

    def test_motion_along_y(self):
        np.testing.assert_allclose(
            ode_rhs(np.array([0, 0, math.pi / 2, 2, 0.0]), np.zeros(2)),
            [0, 2, 0, 0, 0],
            atol=1e-15,
        )

    def test_jacobians_match_finite_differences(self, rng):
        for _ in range(20):
            x = rng.standard_normal(5)
            u = rng.standard_normal(2)
            A, B = ode_jacobians(x, u)
            A_fd = finite_difference_jacobian(lambda z: ode_rhs(z, u), x, h=1e-7)
            B_fd = finite_difference_jacobian(lambda w: ode_rhs(x, w), u, h=1e-7)
            np.testing.assert_allclose(A, A_fd, atol=1e-8)
            np.testing.assert_allclose(B, B_fd, atol=1e-8)


class TestRk4Step:
    def test_linear_subsystem_exact(self):
        x = np.array([0.0, 0.0, 0.0, 1.0, 0.0])
        x_next = rk4_step(x, np.zeros(2), 0.1)
        assert x_next[0] == pytest.approx(0.1, abs=1e-15)

    def test_constant_twist_arc(self):
        # closed-form unicycle arc with v = 1, omega = 1
        dt = 0.1
        x = np.array([0.0, 0.0, 0.0, 1.0, 1.0])
        x_next = rk4_step(x, np.zeros(2), dt)
        assert x_next[0] == pytest.approx(math.sin(dt), abs=1e-7)
        assert x_next[1] == pytest.approx(1.0 - math.cos(dt), abs=1e-7)
        assert x_next[2] == pytest.approx(dt, abs=1e-12)

    def test_sensitivities_match_finite_differences(self, rng):
        for _ in range(20):
            x = rng.standard_normal(5)
            u = rng.standard_normal(2)
            dt = float(rng.uniform(0.01, 0.3))
            x_next, sens_x, sens_u = rk4_step_with_sensitivities(x, u, dt)
            np.testing.assert_allclose(x_next, rk4_step(x, u, dt))
            fx = finite_difference_jacobian(lambda z: rk4_step(z, u, dt), x)
            fu = finite_difference_jacobian(lambda w: rk4_step(x, w, dt), u)
            scale = max(1.0, float(np.abs(fx).max()))
            assert float(np.abs(sens_x - fx).max()) <= 1e-6 * scale
            assert float(np.abs(sens_u - fu).max()) <= 1e-6 * scale

    def test_order_four_convergence(self, rng):
        # halving dt should shrink the one-step-vs-two-half-steps defect ~2^5
        x = np.array([0.1, -0.2, 0.4, 0.8, 0.6])
        u = np.array([0.3, -0.5])
        rates = []
        for dt in [0.2, 0.1, 0.05]:
            full = rk4_step(x, u, dt)
            half = rk4_step(rk4_step(x, u, dt / 2), u, dt / 2)
            rates.append(float(np.linalg.norm(full - half)))
        order = math.log2(rates[0] / rates[1])
        assert order == pytest.approx(5.0, abs=0.3)  # local error order p+1

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            rk4_step(np.zeros(5), np.zeros(2), 0.0)


class TestRotateShape:
    def test_identity_rotation(self):
        shape = RobotShape((2.0, 1.0))
        np.testing.assert_allclose(rotate_shape(shape, 0.0), shape.base_shape)

    def test_quarter_turn_swaps_axes(self):
        rotated = rotate_shape(RobotShape((2.0, 1.0)), math.pi / 2)
        np.testing.assert_allclose(rotated, np.diag([1.0, 4.0]), atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-10.0, 10.0), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
    def test_similarity_invariants(self, theta, a_r, b_r):
        shape = RobotShape((a_r, b_r))
        rotated = rotate_shape(shape, theta)
        base = shape.base_shape
        assert np.trace(rotated) == pytest.approx(np.trace(base), rel=1e-12)
        assert np.linalg.det(rotated) == pytest.approx(np.linalg.det(base), rel=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-6.0, 6.0), st.floats(-6.0, 6.0))
    def test_composition(self, t1, t2):
        shape = RobotShape((1.5, 0.5))
        once = rotate_shape(shape, t1 + t2)
        twice = rotate_shape(rotate_shape(shape, t1), t2)
        np.testing.assert_allclose(once, twice, atol=1e-12)
