"""Command-line front end: scenario files, experiments, machine-readable output.

Subcommands:
    check     validate a scenario file and print derived quantities
    simulate  run the closed-loop MPC and write trajectory/clearance logs
    compare   run the four-way formulation comparison
    plan      run only the reference planner and dump the path/reference

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .collision import ConstraintKind, ConstraintMode, ObstacleSet
from .dynamics import RobotShape, RobotState, rotation_matrix
from .geometry import Ellipsoid, gamma_bounds
from .ocp import ActuatorLimits, Horizon, Scenario, Weights
from .planner import OccupancyGrid, segment_and_fit, theta_star, time_parameterize
from .simulation import (
    PathNotFoundError,
    compare_formulations,
    run_closed_loop,
    write_clearances_csv,
    write_compare_summary_json,
    write_comparison_csv,
    write_exceedance_csv,
    write_summary_json,
    write_trajectory_csv,
)
from .sqp import SqpSettings

__all__ = ["main", "load_scenario", "ScenarioError", "MODE_NAMES"]

MODE_NAMES = {kind.value: kind for kind in ConstraintKind}


class ScenarioError(ValueError):
    """Scenario file failed validation; the message names the field."""


def _get(data: dict, key: str, where: str, required: bool = True, default=None):
    if key not in data:
        if required:
            raise ScenarioError(f"missing field '{where}{key}'")
        return default
    return data[key]


def _floats(value, count: int, where: str) -> list:
    try:
        vals = [float(v) for v in value]
    except (TypeError, ValueError):
        raise ScenarioError(f"field '{where}' must be a list of numbers") from None
    if len(vals) != count:
        raise ScenarioError(f"field '{where}' must have {count} entries")
    return vals


def _parse_robot(data: dict) -> tuple[RobotShape, ActuatorLimits]:
    robot = _get(data, "robot", "")
    if "semi_axes" in robot:
        a_r, b_r = _floats(robot["semi_axes"], 2, "robot.semi_axes")
        if a_r <= 0 or b_r <= 0:
            raise ScenarioError("field 'robot.semi_axes' must be positive")
        shape = RobotShape((a_r, b_r))
    else:
        length, width = _floats(_get(robot, "axes", "robot."), 2, "robot.axes")
        if length <= 0 or width <= 0:
            raise ScenarioError("field 'robot.axes' must be positive")
        shape = RobotShape.from_axis_lengths(length, width)
    limits = _get(robot, "limits", "robot.")
    v = _floats(_get(limits, "v", "robot.limits."), 2, "robot.limits.v")
    omega = _floats(_get(limits, "omega", "robot.limits."), 2, "robot.limits.omega")
    a = _floats(_get(limits, "a", "robot.limits."), 2, "robot.limits.a")
    alpha = _floats(_get(limits, "alpha", "robot.limits."), 2, "robot.limits.alpha")
    try:
        actuator = ActuatorLimits(v[0], v[1], omega[0], omega[1], a[0], a[1], alpha[0], alpha[1])
    except ValueError as exc:
        raise ScenarioError(f"robot.limits: {exc}") from None
    return shape, actuator


def _parse_obstacles(data: dict) -> ObstacleSet:
    entries = _get(data, "obstacles", "", required=False, default=[])
    obstacles = []
    for i, entry in enumerate(entries):
        where = f"obstacles[{i}]."
        center = _floats(_get(entry, "center", where), 2, where + "center")
        semi = _floats(_get(entry, "semi_axes", where), 2, where + "semi_axes")
        if semi[0] <= 0 or semi[1] <= 0:
            raise ScenarioError(f"field '{where}semi_axes' must be positive")
        angle = float(_get(entry, "angle", where, required=False, default=0.0))
        R = rotation_matrix(angle)
        shape = R @ np.diag([semi[0] ** 2, semi[1] ** 2]) @ R.T
        obstacles.append(Ellipsoid(np.array(center), shape))
    return ObstacleSet(tuple(obstacles))


def _parse_map(data: dict) -> OccupancyGrid:
    grid = _get(data, "map", "")
    resolution = float(_get(grid, "resolution", "map."))
    if resolution <= 0:
        raise ScenarioError("field 'map.resolution' must be positive")
    rows = _get(grid, "rows", "map.")
    origin = _floats(_get(grid, "origin", "map.", required=False, default=[0.0, 0.0]), 2, "map.origin")
    try:
        return OccupancyGrid.from_text_rows(rows, resolution, origin)
    except ValueError as exc:
        raise ScenarioError(f"map.rows: {exc}") from None


def _parse_pose(data: dict, key: str) -> RobotState:
    pose = _get(data, key, "")
    pos = _floats(_get(pose, "position", f"{key}."), 2, f"{key}.position")
    heading = float(_get(pose, "heading", f"{key}.", required=False, default=0.0))
    return RobotState(pos[0], pos[1], heading)


def _parse_mode(data: dict, override: str | None) -> ConstraintMode:
    name = override or _get(data, "mode", "", required=False, default="free-gamma")
    if name not in MODE_NAMES:
        raise ScenarioError(
            f"field 'mode' must be one of {sorted(MODE_NAMES)}, got {name!r}"
        )
    margin = float(_get(data, "safety_margin", "", required=False, default=0.0))
    if margin < 0:
        raise ScenarioError("field 'safety_margin' must be nonnegative")
    return ConstraintMode(MODE_NAMES[name], margin)


def _parse_solver(data: dict, max_sqp_override: int | None) -> SqpSettings:
    solver = _get(data, "solver", "", required=False, default={}) or {}
    kwargs = {}
    for key in ("max_sqp_iters", "qp_max_iters"):
        if key in solver:
            kwargs[key] = int(solver[key])
    for key in ("kkt_tol", "qp_tol", "gamma_block_reg"):
        if key in solver:
            kwargs[key] = float(solver[key])
    if max_sqp_override is not None:
        kwargs["max_sqp_iters"] = max_sqp_override
    try:
        return SqpSettings(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"solver: {exc}") from None


def load_scenario(
    path, mode_override: str | None = None, max_sqp_override: int | None = None
) -> tuple[Scenario, SqpSettings]:
    """Parse and validate a scenario JSON file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None

    shape, limits = _parse_robot(data)
    horizon_data = _get(data, "horizon", "")
    try:
        horizon = Horizon(float(_get(horizon_data, "T", "horizon.")), int(_get(horizon_data, "N", "horizon.")))
    except ValueError as exc:
        raise ScenarioError(f"horizon: {exc}") from None
    weights_data = _get(data, "weights", "", required=False, default={}) or {}
    try:
        weights = Weights(
            **{
                key: weights_data[key]
                for key in ("stage_state", "stage_input", "terminal_state")
                if key in weights_data
            }
        )
    except ValueError as exc:
        raise ScenarioError(f"weights: {exc}") from None
    eps = _floats(
        _get(data, "terminal_eps", "", required=False, default=[1e-2, 1e-2]), 2, "terminal_eps"
    )
    lookahead = _get(data, "lookahead", "", required=False)
    scenario = Scenario(
        robot=shape,
        obstacles=_parse_obstacles(data),
        horizon=horizon,
        limits=limits,
        weights=weights,
        mode=_parse_mode(data, mode_override),
        grid=_parse_map(data),
        start=_parse_pose(data, "start"),
        goal=_parse_pose(data, "goal"),
        terminal_eps=(eps[0], eps[1]),
        lookahead=None if lookahead is None else float(lookahead),
        name=str(_get(data, "name", "", required=False, default=Path(path).stem)),
    )
    for name, pose in (("start", scenario.start), ("goal", scenario.goal)):
        cell = scenario.grid.world_to_cell(pose.position)
        if not scenario.grid.is_free(*cell):
            raise ScenarioError(f"field '{name}': cell {cell} is occupied or outside the map")
    return scenario, _parse_solver(data, max_sqp_override)


def cmd_check(args) -> int:
    try:
        scenario, settings = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 1
    print(f"scenario '{scenario.name}': valid")
    print(f"  dt = {scenario.horizon.dt:.6g} s ({scenario.horizon.N} stages over {scenario.horizon.T} s)")
    print(f"  robot semi-axes = {scenario.robot.semi_axes}, width = {scenario.robot.width} m")
    print(f"  mode = {scenario.mode.kind.value}, safety margin = {scenario.mode.safety_margin}")
    print(f"  solver: max_sqp_iters = {settings.max_sqp_iters}, kkt_tol = {settings.kkt_tol}")
    G = scenario.robot.base_shape
    for m, obs in enumerate(scenario.obstacles):
        b = gamma_bounds(G, obs.shape)
        print(f"  obstacle {m}: gamma bounds [{b.lower:.4f}, {b.upper:.4f}]")
    path = theta_star(scenario.grid, scenario.start.position, scenario.goal.position)
    if path is None:
        print("  no grid path between start and goal", file=sys.stderr)
        return 1
    print(f"  reference path: {path.waypoints.shape[0]} waypoints, length {path.length:.4f} m")
    return 0


def cmd_simulate(args) -> int:
    try:
        scenario, settings = load_scenario(args.scenario, args.mode, args.max_sqp_iters)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 1
    if args.steps < 1:
        print("nothing to simulate: --steps must be at least 1", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        log = run_closed_loop(
            scenario, settings, args.steps,
            disturbance_scale=args.disturbance, rng_seed=args.seed,
        )
    except PathNotFoundError as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: nothing sensible to write
        print(f"simulation failed: {exc}", file=sys.stderr)
        return 2
    write_trajectory_csv(log, out / "trajectory.csv")
    write_clearances_csv(log, out / "clearances.csv")
    write_summary_json(log, out / "summary.json")
    ok = log.goal_reached and not log.any_overlap() and not log.any_solver_failure()
    print(
        f"simulated {len(log.records)} steps, goal_reached={log.goal_reached}, "
        f"overlap={log.any_overlap()}, outputs in {out}"
    )
    return 0 if ok else 2


def cmd_compare(args) -> int:
    try:
        scenario, settings = load_scenario(args.scenario, None, args.max_sqp_iters)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 1
    if args.steps < 1:
        print("nothing to compare: --steps must be at least 1", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = compare_formulations(scenario, settings, args.steps)
    except PathNotFoundError as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"comparison failed: {exc}", file=sys.stderr)
        return 2
    log = result.run_log
    write_trajectory_csv(log, out / "trajectory.csv")
    write_clearances_csv(log, out / "clearances.csv")
    write_summary_json(log, out / "summary.json")
    write_comparison_csv(result, out / "comparison.csv")
    write_exceedance_csv(result, out / "exceedance.csv")
    write_compare_summary_json(result, out / "compare_summary.json")
    ok = log.goal_reached and not log.any_overlap()
    print(
        f"compared {len(result.records)} steps, goal_reached={log.goal_reached}, "
        f"outputs in {out}"
    )
    return 0 if ok else 2


def cmd_plan(args) -> int:
    try:
        scenario, _ = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = theta_star(scenario.grid, scenario.start.position, scenario.goal.position)
    if path is None:
        print("planning failed: no grid path between start and goal", file=sys.stderr)
        return 1
    with open(out / "path.csv", "w", newline="") as fh:
        fh.write("px,py\n")
        for wp in path.waypoints:
            fh.write(f"{wp[0]:.12g},{wp[1]:.12g}\n")
    curve = segment_and_fit(path, scenario.start.position, lookahead=path.length + 1.0)
    dt = scenario.horizon.dt
    total = curve.arc_length / max(scenario.limits.v_max, 1e-9) * 2.0 + 4.0
    n_samples = max(scenario.horizon.N, int(math.ceil(total / dt)))
    ref = time_parameterize(
        curve, scenario.limits.v_max, scenario.limits.a_max, dt, n_samples,
        fallback_heading=scenario.start.theta,
    )
    with open(out / "reference.csv", "w", newline="") as fh:
        fh.write("time,px,py,theta,v,omega\n")
        for t, x in zip(ref.times, ref.states):
            fh.write(",".join(format(v, ".12g") for v in (t, *x)) + "\n")
    print(f"path: {path.waypoints.shape[0]} waypoints, {path.length:.4f} m; outputs in {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ellipsoid-mpc",
        description="Collision-free MPC among ellipsoidal obstacles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_check = sub.add_parser("check", help="validate a scenario file")
    p_check.add_argument("scenario", help="path to the scenario JSON file")
    p_check.set_defaults(func=cmd_check)

    p_sim = sub.add_parser("simulate", help="run the closed-loop MPC simulation")
    p_sim.add_argument("scenario")
    p_sim.add_argument("--out", default="out", help="output directory")
    p_sim.add_argument("--mode", choices=sorted(MODE_NAMES), default=None,
                       help="override the scenario's constraint formulation")
    p_sim.add_argument("--steps", type=int, default=300, help="maximum control steps")
    p_sim.add_argument("--seed", type=int, default=0, help="disturbance RNG seed")
    p_sim.add_argument("--disturbance", type=float, default=0.0,
                       help="uniform state disturbance amplitude")
    p_sim.add_argument("--max-sqp-iters", type=int, default=None,
                       help="override the solver iteration cap")
    p_sim.set_defaults(func=cmd_simulate)

    p_cmp = sub.add_parser("compare", help="four-way formulation comparison")
    p_cmp.add_argument("scenario")
    p_cmp.add_argument("--out", default="out", help="output directory")
    p_cmp.add_argument("--steps", type=int, default=300, help="maximum control steps")
    p_cmp.add_argument("--max-sqp-iters", type=int, default=None)
    p_cmp.set_defaults(func=cmd_compare)

    p_plan = sub.add_parser("plan", help="run only the reference planner")
    p_plan.add_argument("scenario")
    p_plan.add_argument("--out", default="out", help="output directory")
    p_plan.set_defaults(func=cmd_plan)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
