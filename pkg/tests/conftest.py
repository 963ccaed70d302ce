import numpy as np
import pytest

from ellipsoid_mpc.collision import ConstraintKind, ConstraintMode, ObstacleSet
from ellipsoid_mpc.dynamics import RobotShape, RobotState, rk4_step
from ellipsoid_mpc.geometry import Ellipsoid
from ellipsoid_mpc.ocp import ActuatorLimits, Horizon, Scenario, Weights
from ellipsoid_mpc.planner import OccupancyGrid, ReferenceTrajectory


def random_pd_matrix(rng, n=2, eig_low=0.1, eig_high=4.0):
    """Random symmetric PD matrix with eigenvalues in [eig_low, eig_high]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(eig_low, eig_high, size=n)
    return q @ np.diag(lam) @ q.T


def random_direction(rng, n=2):
    while True:
        eta = rng.standard_normal(n)
        if np.linalg.norm(eta) > 1e-3:
            return eta


def make_scenario(
    obstacles=(),
    kind=ConstraintKind.MINKOWSKI_FREE_GAMMA,
    margin=0.0,
    T=2.0,
    N=20,
    start=(0.5, 1.0, 0.0),
    goal=(5.5, 1.0, 0.0),
):
    """Small synthetic scenario on an empty 6.4 m x 2.4 m grid."""
    return Scenario(
        robot=RobotShape.from_axis_lengths(0.4, 0.7),
        obstacles=ObstacleSet(tuple(obstacles)),
        horizon=Horizon(T, N),
        limits=ActuatorLimits(-0.2, 0.8, -1.5, 1.5, -1.0, 1.0, -3.0, 3.0),
        weights=Weights(),
        mode=ConstraintMode(kind, margin),
        grid=OccupancyGrid.empty(64, 24, 0.1),
        start=RobotState(*start),
        goal=RobotState(*goal),
    )


def rollout_reference(scenario, u_profile=None):
    """Dynamically feasible reference: RK4 rollout from the scenario start."""
    N = scenario.horizon.N
    dt = scenario.horizon.dt
    inputs = np.zeros((N, 2)) if u_profile is None else np.asarray(u_profile, float)
    states = np.zeros((N + 1, 5))
    states[0] = scenario.start.as_array()
    for k in range(N):
        states[k + 1] = rk4_step(states[k], inputs[k], dt)
    return ReferenceTrajectory(states, inputs, dt * np.arange(N + 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
