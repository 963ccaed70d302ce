"""Closed-loop MPC simulation and the four-way formulation comparison.

Each control step segments the global reference path around the current
plant state, assembles the OCP under the scenario's constraint formulation
(freezing gamma-hat or eta-hat from the shifted previous solution for the
fixed variants), solves it, applies the first input to the plant (the same
RK4 model, optionally with a bounded additive disturbance), and advances the
warm start. The comparison harness drives the loop with the free-gamma
formulation solved to convergence and re-solves each OCP under the other
three formulations, recording objectives, relative additional costs, and
early-terminated solve times.
"""

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .collision import ConstraintKind, ConstraintMode
from .dynamics import rk4_step, rotate_shape
from .geometry import Ellipsoid, interiors_overlap
from .ocp import (
    Scenario,
    WarmStart,
    assemble,
    eta_params_from_states,
    freeze_parameters,
    initial_warm_start,
    shift_warm_start,
)
from .oracles import ellipsoid_pair_distance
from .planner import PathPolyline, ReferenceTrajectory, segment_and_fit, theta_star, time_parameterize
from .sqp import SqpResult, SqpSettings, SqpStatus, solve

__all__ = [
    "StepRecord",
    "RunLog",
    "ComparisonRecord",
    "CompareResult",
    "PathNotFoundError",
    "run_closed_loop",
    "compare_formulations",
    "write_trajectory_csv",
    "write_clearances_csv",
    "write_summary_json",
    "write_comparison_csv",
    "write_exceedance_csv",
    "write_compare_summary_json",
    "GOAL_POSITION_TOL",
]

logger = logging.getLogger(__name__)

GOAL_POSITION_TOL = 0.05

MODE_ORDER = [
    ConstraintKind.MINKOWSKI_FREE_GAMMA,
    ConstraintKind.MINKOWSKI_FIXED_GAMMA,
    ConstraintKind.HYPERPLANE_FREE_ETA,
    ConstraintKind.HYPERPLANE_FIXED_ETA,
]


class PathNotFoundError(RuntimeError):
    """The grid planner could not connect start and goal."""


@dataclass
class StepRecord:
    """One MPC step: what the controller saw, solved, and applied."""

    step: int
    t: float
    state: np.ndarray
    applied_input: np.ndarray
    objective: float
    tracking_cost: float
    kkt_residual: float
    sqp_iterations: int
    qp_iterations: int
    status: str
    solve_time: float
    clearances: np.ndarray
    overlaps: np.ndarray
    max_slack: float
    frozen_params: Optional[np.ndarray] = None


@dataclass
class RunLog:
    """Closed-loop trace plus end-of-run verdicts."""

    mode: str
    dt: float
    n_obstacles: int
    records: list = field(default_factory=list)
    goal_reached: bool = False
    final_state: Optional[np.ndarray] = None

    def min_clearances(self) -> np.ndarray:
        if not self.records or self.n_obstacles == 0:
            return np.zeros(self.n_obstacles)
        return np.min(np.stack([r.clearances for r in self.records]), axis=0)

    def any_overlap(self) -> bool:
        return any(bool(r.overlaps.any()) for r in self.records)

    def any_solver_failure(self) -> bool:
        return any(r.status == SqpStatus.QP_FAILURE.value for r in self.records)


@dataclass
class ComparisonRecord:
    """Four-way objective comparison for one OCP instance."""

    step: int
    objectives: dict
    converged: dict
    rel_additional: dict
    rt_solve_times: dict


@dataclass
class CompareResult:
    run_log: RunLog
    records: list

    def median_rel_cost(self, mode: str) -> float:
        vals = [
            r.rel_additional[mode]
            for r in self.records
            if r.converged["free-gamma"] and r.converged[mode]
        ]
        return float(np.median(vals)) if vals else math.nan

    def rt_time_quantiles(self, mode: str) -> dict:
        vals = np.array([r.rt_solve_times[mode] for r in self.records])
        if vals.size == 0:
            return {"p50": math.nan, "p90": math.nan, "max": math.nan}
        return {
            "p50": float(np.quantile(vals, 0.5)),
            "p90": float(np.quantile(vals, 0.9)),
            "max": float(vals.max()),
        }


def _plan_global_path(scenario: Scenario) -> PathPolyline:
    path = theta_star(scenario.grid, scenario.start.position, scenario.goal.position)
    if path is None:
        raise PathNotFoundError("no grid path between start and goal")
    return path


def _build_reference(scenario: Scenario, path: PathPolyline, plant: np.ndarray) -> ReferenceTrajectory:
    curve = segment_and_fit(path, plant[0:2], scenario.lookahead_or_default)
    v_start = min(max(float(plant[3]), 0.0), scenario.limits.v_max)
    ref = time_parameterize(
        curve,
        scenario.limits.v_max,
        scenario.limits.a_max,
        scenario.horizon.dt,
        scenario.horizon.N,
        v_start=v_start,
        fallback_heading=float(plant[2]),
    )
    # put the reference headings on the robot's unwrapped branch
    shift = 2.0 * math.pi * round((float(plant[2]) - ref.states[0, 2]) / (2.0 * math.pi))
    if shift != 0.0:
        states = ref.states.copy()
        states[:, 2] += shift
        ref = ReferenceTrajectory(states, ref.inputs, ref.times)
    return ref


def _clearances(scenario: Scenario, plant: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_m = len(scenario.obstacles)
    clear = np.zeros(n_m)
    overlap = np.zeros(n_m, dtype=bool)
    body = Ellipsoid(plant[0:2], rotate_shape(scenario.robot, plant[2]))
    for m, obs in enumerate(scenario.obstacles):
        if interiors_overlap(body, obs):
            overlap[m] = True
            clear[m] = 0.0
        else:
            clear[m], _, _ = ellipsoid_pair_distance(body, obs)
    return clear, overlap


def _goal_reached(scenario: Scenario, plant: np.ndarray) -> bool:
    pos_err = float(np.linalg.norm(plant[0:2] - scenario.goal.position))
    return pos_err <= GOAL_POSITION_TOL and abs(plant[3]) <= scenario.terminal_eps[0]


def _prepare_nlp(scenario: Scenario, reference, warm, x0):
    nlp = assemble(scenario, reference, warm, x0=x0)
    if scenario.mode.kind.is_fixed:
        guess = warm.states if warm is not None else reference.states
        nlp = freeze_parameters(nlp, guess)
    return nlp


def run_closed_loop(
    scenario: Scenario,
    settings: SqpSettings,
    steps: int,
    disturbance_scale: float = 0.0,
    rng_seed: int = 0,
) -> RunLog:
    """Simulate MPC for at most ``steps`` control periods.

    The plant equals the prediction model (nominal simulation); a bounded
    uniform state disturbance can be injected for robustness experiments.
    Terminates early once the goal position is reached at near-zero speed.
    A failed QP logs the step and applies zero input.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    dt = scenario.horizon.dt
    path = _plan_global_path(scenario)
    rng = np.random.default_rng(rng_seed)
    log = RunLog(scenario.mode.kind.value, dt, len(scenario.obstacles))

    plant = scenario.start.as_array()
    warm = None
    for step in range(steps):
        reference = _build_reference(scenario, path, plant)
        if warm is None:
            warm = initial_warm_start(scenario, reference)
        warm.states[0] = plant
        nlp = _prepare_nlp(scenario, reference, warm, plant)
        t0 = time.perf_counter()
        result = solve(nlp, settings)
        solve_time = time.perf_counter() - t0

        if result.status is SqpStatus.QP_FAILURE:
            logger.warning("step %d: QP failure, braking", step)
            u0 = np.zeros(2)
            warm = None
        else:
            u0 = result.inputs[0].copy()
            warm = shift_warm_start(
                WarmStart(result.states, result.inputs, result.params)
            )

        clear, overlap = _clearances(scenario, plant)
        log.records.append(
            StepRecord(
                step=step,
                t=step * dt,
                state=plant.copy(),
                applied_input=u0.copy(),
                objective=result.objective,
                tracking_cost=result.tracking_cost,
                kkt_residual=result.kkt_residual,
                sqp_iterations=result.iterations,
                qp_iterations=result.qp_iterations,
                status=result.status.value,
                solve_time=solve_time,
                clearances=clear,
                overlaps=overlap,
                max_slack=result.max_slack,
                frozen_params=None if nlp.frozen_params is None else nlp.frozen_params.copy(),
            )
        )

        plant = rk4_step(plant, u0, dt)
        if disturbance_scale > 0.0:
            plant = plant + disturbance_scale * rng.uniform(-1.0, 1.0, plant.size)
        if _goal_reached(scenario, plant):
            log.goal_reached = True
            break

    log.final_state = plant.copy()
    return log


def compare_formulations(
    scenario: Scenario, settings: SqpSettings, steps: int
) -> CompareResult:
    """Drive the closed loop with converged free-gamma solves and benchmark.

    At every step the same OCP (same reference, same state pin, same
    state/input warm start) is additionally solved to convergence under the
    fixed gamma-hat, free-eta, and fixed eta-hat formulations, and once more
    per formulation with the iteration cap at two for the timing study.
    Relative additional cost is (restricted - free) / free on the converged
    objectives; records where a side solve did not converge are flagged.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    margin = scenario.mode.safety_margin
    scenarios = {
        kind.value: scenario.with_mode(ConstraintMode(kind, margin)) for kind in MODE_ORDER
    }
    base = scenarios[ConstraintKind.MINKOWSKI_FREE_GAMMA.value]
    converged_settings = dataclasses.replace(
        settings, max_sqp_iters=max(settings.max_sqp_iters, 50)
    )
    rt_settings = dataclasses.replace(settings, max_sqp_iters=2)

    dt = base.horizon.dt
    path = _plan_global_path(base)
    log = RunLog(base.mode.kind.value, dt, len(base.obstacles))
    records = []

    plant = base.start.as_array()
    warm = None
    for step in range(steps):
        reference = _build_reference(base, path, plant)
        if warm is None:
            warm = initial_warm_start(base, reference)
        warm.states[0] = plant

        eta_warm = WarmStart(
            warm.states.copy(),
            warm.inputs.copy(),
            eta_params_from_states(base, warm.states),
        )
        nlps = {}
        for kind in MODE_ORDER:
            name = kind.value
            scn = scenarios[name]
            mode_warm = eta_warm if kind is ConstraintKind.HYPERPLANE_FREE_ETA else warm
            if kind.is_fixed:
                mode_warm = WarmStart(
                    warm.states.copy(), warm.inputs.copy(), np.zeros((warm.states.shape[0], 0))
                )
            nlps[name] = _prepare_nlp(scn, reference, mode_warm, plant)

        objectives = {}
        converged = {}
        results = {}
        for name, nlp in nlps.items():
            t0 = time.perf_counter()
            result = solve(nlp, converged_settings)
            elapsed = time.perf_counter() - t0
            results[name] = result
            objectives[name] = result.objective
            converged[name] = result.status is SqpStatus.CONVERGED
            if name == ConstraintKind.MINKOWSKI_FREE_GAMMA.value:
                free_solve_time = elapsed

        rt_times = {}
        for name, nlp in nlps.items():
            t0 = time.perf_counter()
            solve(nlp, rt_settings)
            rt_times[name] = time.perf_counter() - t0

        free_obj = objectives[ConstraintKind.MINKOWSKI_FREE_GAMMA.value]
        rel = {}
        for kind in MODE_ORDER[1:]:
            name = kind.value
            rel[name] = (objectives[name] - free_obj) / max(free_obj, 1e-12)
        records.append(
            ComparisonRecord(
                step=step,
                objectives=objectives,
                converged=converged,
                rel_additional=rel,
                rt_solve_times=rt_times,
            )
        )

        free_result = results[ConstraintKind.MINKOWSKI_FREE_GAMMA.value]
        clear, overlap = _clearances(base, plant)
        log.records.append(
            StepRecord(
                step=step,
                t=step * dt,
                state=plant.copy(),
                applied_input=free_result.inputs[0].copy(),
                objective=free_result.objective,
                tracking_cost=free_result.tracking_cost,
                kkt_residual=free_result.kkt_residual,
                sqp_iterations=free_result.iterations,
                qp_iterations=free_result.qp_iterations,
                status=free_result.status.value,
                solve_time=free_solve_time,
                clearances=clear,
                overlaps=overlap,
                max_slack=free_result.max_slack,
            )
        )

        plant = rk4_step(plant, free_result.inputs[0], dt)
        warm = shift_warm_start(
            WarmStart(free_result.states, free_result.inputs, free_result.params)
        )
        if _goal_reached(base, plant):
            log.goal_reached = True
            break

    log.final_state = plant.copy()
    return CompareResult(log, records)


# ---------------------------------------------------------------------------
# machine-readable outputs
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return format(float(value), ".12g")


def write_trajectory_csv(log: RunLog, path) -> None:
    """One row per control step; no wall-clock columns, so byte-reproducible."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "step", "time", "px", "py", "theta", "v", "omega", "a", "alpha",
                "objective", "tracking_cost", "kkt_residual",
                "sqp_iterations", "qp_iterations", "status", "max_slack",
            ]
        )
        for r in log.records:
            writer.writerow(
                [r.step, _fmt(r.t)]
                + [_fmt(v) for v in r.state]
                + [_fmt(v) for v in r.applied_input]
                + [_fmt(r.objective), _fmt(r.tracking_cost), _fmt(r.kkt_residual),
                   r.sqp_iterations, r.qp_iterations, r.status, _fmt(r.max_slack)]
            )


def write_clearances_csv(log: RunLog, path) -> None:
    n_m = log.n_obstacles
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "time"]
            + [f"clearance_{m}" for m in range(n_m)]
            + [f"overlap_{m}" for m in range(n_m)]
        )
        for r in log.records:
            writer.writerow(
                [r.step, _fmt(r.t)]
                + [_fmt(c) for c in r.clearances]
                + [int(o) for o in r.overlaps]
            )


def write_summary_json(log: RunLog, path) -> None:
    objectives = np.array([r.objective for r in log.records]) if log.records else np.zeros(0)
    times = np.array([r.solve_time for r in log.records]) if log.records else np.zeros(0)
    sqp_iters = np.array([r.sqp_iterations for r in log.records]) if log.records else np.zeros(0)
    min_clear = log.min_clearances()
    summary = {
        "schema_version": 1,
        "mode": log.mode,
        "dt": log.dt,
        "steps": len(log.records),
        "goal_reached": log.goal_reached,
        "any_overlap": log.any_overlap(),
        "any_solver_failure": log.any_solver_failure(),
        "min_clearance_per_obstacle": [float(c) for c in min_clear],
        "min_clearance": float(min_clear.min()) if min_clear.size else None,
        "objective": {
            "mean": float(objectives.mean()) if objectives.size else None,
            "median": float(np.median(objectives)) if objectives.size else None,
            "max": float(objectives.max()) if objectives.size else None,
        },
        "sqp_iterations": {
            "mean": float(sqp_iters.mean()) if sqp_iters.size else None,
            "max": int(sqp_iters.max()) if sqp_iters.size else None,
        },
        "solve_time": {
            "p50": float(np.quantile(times, 0.5)) if times.size else None,
            "p90": float(np.quantile(times, 0.9)) if times.size else None,
            "max": float(times.max()) if times.size else None,
        },
        "final_state": None if log.final_state is None else [float(v) for v in log.final_state],
    }
    if log.records and log.records[0].frozen_params is not None:
        stacked = np.stack([r.frozen_params for r in log.records if r.frozen_params is not None])
        summary["frozen_parameters"] = {
            "min": float(stacked.min()),
            "max": float(stacked.max()),
        }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_comparison_csv(result: CompareResult, path) -> None:
    names = [k.value for k in MODE_ORDER]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step"]
            + [f"objective_{n}" for n in names]
            + [f"converged_{n}" for n in names]
            + [f"rel_additional_{n}" for n in names[1:]]
            + [f"rt_solve_time_{n}" for n in names]
        )
        for r in result.records:
            writer.writerow(
                [r.step]
                + [_fmt(r.objectives[n]) for n in names]
                + [int(r.converged[n]) for n in names]
                + [_fmt(r.rel_additional[n]) for n in names[1:]]
                + [_fmt(r.rt_solve_times[n]) for n in names]
            )


def write_exceedance_csv(result: CompareResult, path) -> None:
    """Fraction of OCPs whose relative additional cost exceeds each level."""
    names = [k.value for k in MODE_ORDER[1:]]
    per_mode = {}
    levels = set()
    for name in names:
        vals = np.array(
            [
                r.rel_additional[name]
                for r in result.records
                if r.converged["free-gamma"] and r.converged[name]
            ]
        )
        per_mode[name] = vals
        levels.update(float(v) for v in vals)
    grid = sorted(levels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level"] + [f"fraction_exceeding_{n}" for n in names])
        for level in grid:
            row = [_fmt(level)]
            for name in names:
                vals = per_mode[name]
                frac = float(np.mean(vals > level)) if vals.size else math.nan
                row.append(_fmt(frac))
            writer.writerow(row)


def write_compare_summary_json(result: CompareResult, path) -> None:
    names = [k.value for k in MODE_ORDER]
    summary = {
        "schema_version": 1,
        "steps": len(result.records),
        "goal_reached": result.run_log.goal_reached,
        "median_rel_additional": {n: result.median_rel_cost(n) for n in names[1:]},
        "worst_rel_additional": {},
        "rt_solve_time": {n: result.rt_time_quantiles(n) for n in names},
        "converged_counts": {
            n: int(sum(r.converged[n] for r in result.records)) for n in names
        },
    }
    for n in names[1:]:
        vals = [
            r.rel_additional[n]
            for r in result.records
            if r.converged["free-gamma"] and r.converged[n]
        ]
        summary["worst_rel_additional"][n] = float(max(vals)) if vals else math.nan
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
