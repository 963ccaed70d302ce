"""Stagewise NLP assembly for the tracking OCP with collision constraints.

The discrete-time optimal control problem has decision blocks per stage
(state x_k, input u_k, and, depending on the constraint formulation, one
over-approximation parameter gamma per obstacle or one hyperplane normal eta
per obstacle), a weighted squared reference-tracking objective, RK4 dynamics
defects, actuator boxes, terminal stationarity, and one collision constraint
per obstacle and stage. Collision rows carry L1-penalized slack variables so
the QP subproblems stay feasible under early termination.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .collision import (
    ETA_NORM_FLOOR,
    ConstraintKind,
    ConstraintMode,
    ObstacleSet,
    _hyperplane_terms,
    _minkowski_terms,
    fixed_eta_hat,
    fixed_gamma_hat,
    tightest_gamma,
)
from .dynamics import NU, NX, RobotShape, RobotState, rk4_step_with_sensitivities, rotate_shape
from .geometry import Ellipsoid
from .planner import OccupancyGrid, ReferenceTrajectory

__all__ = [
    "Horizon",
    "ActuatorLimits",
    "Weights",
    "Scenario",
    "WarmStart",
    "StagewiseNLP",
    "assemble",
    "freeze_parameters",
    "shift_warm_start",
    "initial_warm_start",
    "eta_params_from_states",
    "GAMMA_NUMERIC_LIMIT",
    "SLACK_PENALTY",
]

# Numeric box intersected with the eigenvalue-ratio gamma bounds; keeps
# exp(gamma) below 5e8 inside the solver.
GAMMA_NUMERIC_LIMIT = 20.0

# L1 penalty weight on collision slacks.
SLACK_PENALTY = 1e4


@dataclass(frozen=True)
class Horizon:
    """Prediction horizon: length T seconds split into N intervals."""

    T: float
    N: int

    def __post_init__(self):
        if self.T <= 0.0 or self.N < 1:
            raise ValueError("horizon requires T > 0 and N >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.N


@dataclass(frozen=True)
class ActuatorLimits:
    """Box limits on speed, turn rate, and the two accelerations."""

    v_min: float
    v_max: float
    omega_min: float
    omega_max: float
    a_min: float
    a_max: float
    alpha_min: float
    alpha_max: float

    def __post_init__(self):
        pairs = [
            (self.v_min, self.v_max),
            (self.omega_min, self.omega_max),
            (self.a_min, self.a_max),
            (self.alpha_min, self.alpha_max),
        ]
        if any(lo >= hi for lo, hi in pairs):
            raise ValueError("each lower limit must be below its upper limit")


def _weight_vector(v, size, name):
    w = np.asarray(v, dtype=float).reshape(-1)
    if w.size != size:
        raise ValueError(f"{name} must have {size} entries")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be finite and nonnegative")
    w.flags.writeable = False
    return w


@dataclass(frozen=True)
class Weights:
    """Diagonal tracking weights for stage states, inputs, terminal state."""

    stage_state: np.ndarray = field(default_factory=lambda: np.array([10.0, 10.0, 1.0, 1.0, 1.0]))
    stage_input: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    terminal_state: np.ndarray = field(
        default_factory=lambda: np.array([100.0, 100.0, 10.0, 10.0, 10.0])
    )

    def __post_init__(self):
        object.__setattr__(self, "stage_state", _weight_vector(self.stage_state, NX, "stage_state"))
        object.__setattr__(self, "stage_input", _weight_vector(self.stage_input, NU, "stage_input"))
        object.__setattr__(
            self, "terminal_state", _weight_vector(self.terminal_state, NX, "terminal_state")
        )


@dataclass(frozen=True)
class Scenario:
    """Everything needed to pose and simulate one planning problem."""

    robot: RobotShape
    obstacles: ObstacleSet
    horizon: Horizon
    limits: ActuatorLimits
    weights: Weights
    mode: ConstraintMode
    grid: OccupancyGrid
    start: RobotState
    goal: RobotState
    terminal_eps: tuple[float, float] = (1e-2, 1e-2)
    lookahead: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        eps_v, eps_w = self.terminal_eps
        if eps_v <= 0.0 or eps_w <= 0.0:
            raise ValueError("terminal stationarity tolerances must be positive")

    @property
    def lookahead_or_default(self) -> float:
        if self.lookahead is not None:
            return self.lookahead
        return 1.5 * self.limits.v_max * self.horizon.T

    def with_mode(self, mode: ConstraintMode) -> "Scenario":
        return dataclasses.replace(self, mode=mode)


@dataclass
class WarmStart:
    """Initial iterate for the solver: one block per stage."""

    states: np.ndarray  # (N+1, NX)
    inputs: np.ndarray  # (N, NU)
    params: np.ndarray  # (N+1, nparam); zero columns when the mode is fixed

    def copy(self) -> "WarmStart":
        return WarmStart(self.states.copy(), self.inputs.copy(), self.params.copy())


@dataclass
class StagewiseNLP:
    """Solver-facing problem: per-stage blocks plus residual/Jacobian callbacks.

    Conventions: equality defects are x_{k+1} - f(x_k, u_k) = 0 with the
    initial state pinned to ``x0``; stage inequality callbacks return rows
    that are feasible when >= 0; rows flagged in ``slack_rows`` receive an
    L1-penalized slack s >= 0 and become g + s >= 0.
    """

    n_stages: int
    nx: int
    nu: int
    nparam: int
    x0: np.ndarray
    dynamics: Callable[[np.ndarray, np.ndarray, int], tuple[np.ndarray, np.ndarray, np.ndarray]]
    x_ref: np.ndarray
    u_ref: np.ndarray
    w_stage_x: np.ndarray
    w_input: np.ndarray
    w_term_x: np.ndarray
    stage_ineq: Optional[Callable[[int, np.ndarray, np.ndarray], tuple]]
    n_ineq: int
    slack_rows: np.ndarray
    slack_penalty: float
    x_lb: np.ndarray
    x_ub: np.ndarray
    xN_lb: np.ndarray
    xN_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    p_lb: np.ndarray
    p_ub: np.ndarray
    warm: WarmStart
    mode: Optional[ConstraintMode] = None
    scenario: Optional[Scenario] = None
    frozen_params: Optional[np.ndarray] = None
    # optional per-stage parameter re-centering applied between SQP steps;
    # must never lower any inequality row at fixed (x, u)
    polish_params: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.x_ref.shape != (self.n_stages + 1, self.nx):
            raise ValueError("x_ref shape does not match the horizon")
        if self.u_ref.shape != (self.n_stages, self.nu):
            raise ValueError("u_ref shape does not match the horizon")
        if self.warm.states.shape != self.x_ref.shape:
            raise ValueError("warm-start states do not match the horizon")
        if self.warm.inputs.shape != self.u_ref.shape:
            raise ValueError("warm-start inputs do not match the horizon")
        if self.warm.params.shape != (self.n_stages + 1, self.nparam):
            raise ValueError("warm-start params do not match the horizon")
        if self.slack_rows.shape != (self.n_ineq,):
            raise ValueError("slack_rows must have one flag per inequality row")

    @property
    def n_slack(self) -> int:
        return int(np.count_nonzero(self.slack_rows))

    def tracking_cost(self, states: np.ndarray, inputs: np.ndarray) -> float:
        ex = states - self.x_ref
        eu = inputs - self.u_ref
        cost = float(np.sum(ex[:-1] ** 2 * self.w_stage_x))
        cost += float(np.sum(ex[-1] ** 2 * self.w_term_x))
        cost += float(np.sum(eu**2 * self.w_input))
        return cost

    def objective(self, states: np.ndarray, inputs: np.ndarray, slacks: np.ndarray) -> float:
        return self.tracking_cost(states, inputs) + self.slack_penalty * float(np.sum(slacks))

    def requires_freeze(self) -> bool:
        return self.mode is not None and self.mode.kind.is_fixed and self.stage_ineq is None


def _clip_params(params: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
    if params.shape[1] == 0:
        return params.copy()
    return np.clip(params, lb, ub)


def _gamma_boxes(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    boxes = scenario.obstacles.gamma_boxes(scenario.robot, GAMMA_NUMERIC_LIMIT)
    lb = np.array([b.lower for b in boxes])
    ub = np.array([b.upper for b in boxes])
    return lb, ub


def _free_gamma_ineq(scenario: Scenario):
    obstacles = list(scenario.obstacles)
    n_m = len(obstacles)
    G = scenario.robot.base_shape
    margin = scenario.mode.safety_margin

    def stage_ineq(k, x, p):
        g = np.empty(n_m)
        Jx = np.zeros((n_m, NX))
        Jp = np.zeros((n_m, n_m))
        for m, obs in enumerate(obstacles):
            r, grad = _minkowski_terms(x[0:2], x[2], G, obs.center, obs.shape, p[m])
            g[m] = r - (1.0 + margin)
            Jx[m, 0:3] = grad[0:3]
            Jp[m, m] = grad[3]
        return g, Jx, Jp

    return stage_ineq, n_m, np.ones(n_m, dtype=bool)


def _free_gamma_polish(scenario: Scenario, p_lb: np.ndarray, p_ub: np.ndarray):
    obstacles = list(scenario.obstacles)
    shape = scenario.robot

    def polish(k, x, p):
        out = p.copy()
        for m, obs in enumerate(obstacles):
            out[m] = tightest_gamma(
                x[0:2], x[2], shape, obs.center, obs.shape, p[m], p_lb[m], p_ub[m]
            )
        return out

    return polish


def _fixed_gamma_ineq(scenario: Scenario, gamma_table: np.ndarray):
    obstacles = list(scenario.obstacles)
    n_m = len(obstacles)
    G = scenario.robot.base_shape
    margin = scenario.mode.safety_margin

    def stage_ineq(k, x, p):
        g = np.empty(n_m)
        Jx = np.zeros((n_m, NX))
        Jp = np.zeros((n_m, 0))
        for m, obs in enumerate(obstacles):
            r, grad = _minkowski_terms(
                x[0:2], x[2], G, obs.center, obs.shape, gamma_table[k, m]
            )
            g[m] = r - (1.0 + margin)
            Jx[m, 0:3] = grad[0:3]
        return g, Jx, Jp

    return stage_ineq, n_m, np.ones(n_m, dtype=bool)


def _free_eta_ineq(scenario: Scenario):
    # three rows per obstacle: separation (slacked), eta norm cap, eta norm floor
    obstacles = list(scenario.obstacles)
    n_m = len(obstacles)
    G = scenario.robot.base_shape
    margin = scenario.mode.safety_margin

    def stage_ineq(k, x, p):
        g = np.empty(3 * n_m)
        Jx = np.zeros((3 * n_m, NX))
        Jp = np.zeros((3 * n_m, 2 * n_m))
        for m, obs in enumerate(obstacles):
            eta = p[2 * m : 2 * m + 2]
            sep, grad = _hyperplane_terms(x[0:2], x[2], G, obs.center, obs.shape, eta)
            base = 3 * m
            g[base] = sep - margin
            Jx[base, 0:3] = grad[0:3]
            Jp[base, 2 * m : 2 * m + 2] = grad[3:5]
            nn = float(eta @ eta)
            g[base + 1] = 1.0 - nn
            Jp[base + 1, 2 * m : 2 * m + 2] = -2.0 * eta
            g[base + 2] = nn - ETA_NORM_FLOOR
            Jp[base + 2, 2 * m : 2 * m + 2] = 2.0 * eta
        return g, Jx, Jp

    slack = np.zeros(3 * n_m, dtype=bool)
    slack[0::3] = True
    return stage_ineq, 3 * n_m, slack


def _fixed_eta_ineq(scenario: Scenario, eta_table: np.ndarray):
    obstacles = list(scenario.obstacles)
    n_m = len(obstacles)
    G = scenario.robot.base_shape
    margin = scenario.mode.safety_margin

    def stage_ineq(k, x, p):
        g = np.empty(n_m)
        Jx = np.zeros((n_m, NX))
        Jp = np.zeros((n_m, 0))
        for m, obs in enumerate(obstacles):
            sep, grad = _hyperplane_terms(
                x[0:2], x[2], G, obs.center, obs.shape, eta_table[k, m]
            )
            g[m] = sep - margin
            Jx[m, 0:3] = grad[0:3]
        return g, Jx, Jp

    return stage_ineq, n_m, np.ones(n_m, dtype=bool)


def _mode_structure(scenario: Scenario):
    """Inequality callback, row count, slack flags, and param box per mode."""
    kind = scenario.mode.kind
    n_m = len(scenario.obstacles)
    if n_m == 0:
        return None, 0, np.zeros(0, dtype=bool), 0, np.zeros(0), np.zeros(0)
    if kind is ConstraintKind.MINKOWSKI_FREE_GAMMA:
        cb, n_ineq, slack = _free_gamma_ineq(scenario)
        p_lb, p_ub = _gamma_boxes(scenario)
        return cb, n_ineq, slack, n_m, p_lb, p_ub
    if kind is ConstraintKind.HYPERPLANE_FREE_ETA:
        cb, n_ineq, slack = _free_eta_ineq(scenario)
        inf = np.full(2 * n_m, np.inf)
        return cb, n_ineq, slack, 2 * n_m, -inf, inf
    if kind is ConstraintKind.MINKOWSKI_FIXED_GAMMA:
        return None, n_m, np.ones(n_m, dtype=bool), 0, np.zeros(0), np.zeros(0)
    if kind is ConstraintKind.HYPERPLANE_FIXED_ETA:
        return None, n_m, np.ones(n_m, dtype=bool), 0, np.zeros(0), np.zeros(0)
    raise ValueError(f"unknown constraint kind {kind}")


def eta_params_from_states(scenario: Scenario, states: np.ndarray) -> np.ndarray:
    """Stacked shortest-vector directions, one per obstacle and stage."""
    n_m = len(scenario.obstacles)
    params = np.zeros((states.shape[0], 2 * n_m))
    for k in range(states.shape[0]):
        body = Ellipsoid(states[k, 0:2], rotate_shape(scenario.robot, states[k, 2]))
        for m, obs in enumerate(scenario.obstacles):
            params[k, 2 * m : 2 * m + 2] = fixed_eta_hat(body, obs)
    return params


def initial_warm_start(scenario: Scenario, reference: ReferenceTrajectory) -> WarmStart:
    """First-step initialization: reference states, zero inputs, zero gammas.

    Free hyperplane normals start from the shortest-vector direction at the
    reference states; a zero normal would sit in the excluded degenerate
    region.
    """
    _, _, _, nparam, p_lb, p_ub = _mode_structure(scenario)
    N = scenario.horizon.N
    params = np.zeros((N + 1, nparam))
    if scenario.mode.kind is ConstraintKind.HYPERPLANE_FREE_ETA and nparam:
        params = eta_params_from_states(scenario, reference.states)
    elif nparam:
        params = np.clip(params, p_lb, p_ub)
    return WarmStart(reference.states.copy(), np.zeros((N, NU)), params)


def assemble(
    scenario: Scenario,
    reference: ReferenceTrajectory,
    warm_start: Optional[WarmStart] = None,
    x0=None,
) -> StagewiseNLP:
    """Build the stagewise NLP for one OCP instance.

    ``x0`` is the measured state pin (defaults to the scenario start);
    ``warm_start`` defaults to the first-step initialization. Fixed-parameter
    modes come back without their inequality callback and must go through
    :func:`freeze_parameters` before solving.
    """
    N = scenario.horizon.N
    dt = scenario.horizon.dt
    if reference.states.shape != (N + 1, NX):
        raise ValueError(
            f"reference has {reference.states.shape[0] - 1} stages, scenario wants {N}"
        )
    x0 = scenario.start.as_array() if x0 is None else np.asarray(x0, float).reshape(NX)

    stage_ineq, n_ineq, slack_rows, nparam, p_lb, p_ub = _mode_structure(scenario)

    if warm_start is None:
        warm = initial_warm_start(scenario, reference)
    else:
        warm = warm_start.copy()
    if warm.params.shape[1] != nparam:
        raise ValueError(
            f"warm-start params have width {warm.params.shape[1]}, mode requires {nparam}"
        )
    warm.params = _clip_params(warm.params, p_lb, p_ub)
    warm.states[0] = x0

    lim = scenario.limits
    inf = math.inf
    x_lb = np.array([-inf, -inf, -inf, lim.v_min, lim.omega_min])
    x_ub = np.array([inf, inf, inf, lim.v_max, lim.omega_max])
    eps_v, eps_w = scenario.terminal_eps
    xN_lb = np.array([-inf, -inf, -inf, -eps_v, -eps_w])
    xN_ub = np.array([inf, inf, inf, eps_v, eps_w])
    u_lb = np.array([lim.a_min, lim.alpha_min])
    u_ub = np.array([lim.a_max, lim.alpha_max])

    def dynamics(x, u, k):
        return rk4_step_with_sensitivities(x, u, dt)

    polish = None
    if scenario.mode.kind is ConstraintKind.MINKOWSKI_FREE_GAMMA and nparam:
        polish = _free_gamma_polish(scenario, p_lb, p_ub)

    return StagewiseNLP(
        n_stages=N,
        nx=NX,
        nu=NU,
        nparam=nparam,
        x0=x0,
        dynamics=dynamics,
        x_ref=reference.states.copy(),
        u_ref=reference.inputs.copy(),
        w_stage_x=scenario.weights.stage_state,
        w_input=scenario.weights.stage_input,
        w_term_x=scenario.weights.terminal_state,
        stage_ineq=stage_ineq,
        n_ineq=n_ineq,
        slack_rows=slack_rows,
        slack_penalty=SLACK_PENALTY,
        x_lb=x_lb,
        x_ub=x_ub,
        xN_lb=xN_lb,
        xN_ub=xN_ub,
        u_lb=u_lb,
        u_ub=u_ub,
        p_lb=p_lb,
        p_ub=p_ub,
        warm=warm,
        mode=scenario.mode,
        scenario=scenario,
        polish_params=polish,
    )


def freeze_parameters(nlp: StagewiseNLP, guess) -> StagewiseNLP:
    """Embed fixed gamma-hat or eta-hat values computed from a guess trajectory.

    The guess is a WarmStart or an (N+1, 5) state array, normally the shifted
    previous solution. Returns a new NLP whose collision rows close over the
    frozen table; the problem has no gamma/eta decision blocks.
    """
    if nlp.mode is None or not nlp.mode.kind.is_fixed:
        raise ValueError("freeze_parameters applies only to fixed-parameter modes")
    scenario = nlp.scenario
    if scenario is None:
        raise ValueError("freeze_parameters needs the originating scenario")
    states = guess.states if isinstance(guess, WarmStart) else np.asarray(guess, float)
    if states.shape != (nlp.n_stages + 1, nlp.nx):
        raise ValueError("guess trajectory does not match the horizon")

    N = nlp.n_stages
    n_m = len(scenario.obstacles)
    if nlp.mode.kind is ConstraintKind.MINKOWSKI_FIXED_GAMMA:
        table = np.empty((N + 1, n_m))
        for k in range(N + 1):
            for m, obs in enumerate(scenario.obstacles):
                g_hat = fixed_gamma_hat(states[k], scenario.robot, obs.center, obs.shape)
                table[k, m] = min(max(g_hat, -GAMMA_NUMERIC_LIMIT), GAMMA_NUMERIC_LIMIT)
        stage_ineq, n_ineq, slack = _fixed_gamma_ineq(scenario, table)
    else:
        table = np.empty((N + 1, n_m, 2))
        for k in range(N + 1):
            body = Ellipsoid(
                states[k, 0:2], rotate_shape(scenario.robot, states[k, 2])
            )
            for m, obs in enumerate(scenario.obstacles):
                table[k, m] = fixed_eta_hat(body, obs)
        stage_ineq, n_ineq, slack = _fixed_eta_ineq(scenario, table)

    return dataclasses.replace(
        nlp, stage_ineq=stage_ineq, n_ineq=n_ineq, slack_rows=slack, frozen_params=table
    )


def shift_warm_start(previous: WarmStart, p_lb=None, p_ub=None) -> WarmStart:
    """Time-shift a solution by one stage for the next MPC step.

    Stages 1..N move to 0..N-1 and the last stage is duplicated; the extra
    parameter blocks shift identically and are re-clamped to their box when
    bounds are given.
    """
    states = np.vstack([previous.states[1:], previous.states[-1:]])
    inputs = (
        np.vstack([previous.inputs[1:], previous.inputs[-1:]])
        if previous.inputs.shape[0] > 1
        else previous.inputs.copy()
    )
    params = np.vstack([previous.params[1:], previous.params[-1:]])
    if p_lb is not None and p_ub is not None and params.shape[1]:
        params = np.clip(params, p_lb, p_ub)
    return WarmStart(states, inputs, params)
