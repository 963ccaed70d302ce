"""Reference generation: any-angle grid planning and time parameterization.

A Theta* search over an occupancy grid produces a sparse any-angle polyline
that is collision-free for a point object (deliberately ignoring the robot
shape; the OCP's collision constraints handle the body). Per control step the
polyline is clipped to a lookahead window around the robot, smoothed with a
natural cubic spline, and converted to a state/input reference by a
trapezoidal velocity profile.
"""

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "OccupancyGrid",
    "PathPolyline",
    "ReferenceTrajectory",
    "SmoothPath",
    "line_of_sight",
    "theta_star",
    "segment_and_fit",
    "time_parameterize",
]

_GRIDLINE_EPS = 1e-9


@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean occupancy grid: ``occupancy[iy, ix]`` True means blocked.

    ``origin`` is the world coordinate of the lower-left corner of cell
    (0, 0); cell (ix, iy) spans [ox + ix*res, ox + (ix+1)*res) etc.
    """

    resolution: float
    occupancy: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if self.resolution <= 0.0:
            raise ValueError("resolution must be positive")
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 2:
            raise ValueError("occupancy must be a 2-D array")
        origin = np.asarray(self.origin, dtype=float).reshape(2)
        occ.flags.writeable = False
        origin.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def from_text_rows(cls, rows, resolution: float, origin=(0.0, 0.0)) -> "OccupancyGrid":
        """Parse a map given as text rows, '.' free and '#' occupied.

        The first row of the list is the visual top of the map (largest y).
        """
        if not rows:
            raise ValueError("map must have at least one row")
        width = len(rows[0])
        parsed = []
        for i, row in enumerate(rows):
            if len(row) != width:
                raise ValueError(f"map row {i} has length {len(row)}, expected {width}")
            cells = []
            for ch in row:
                if ch == "#":
                    cells.append(True)
                elif ch == ".":
                    cells.append(False)
                else:
                    raise ValueError(f"map row {i}: unknown cell character {ch!r}")
            parsed.append(cells)
        occ = np.flipud(np.array(parsed, dtype=bool))
        return cls(resolution, occ, np.asarray(origin, dtype=float))

    @classmethod
    def empty(cls, width: int, height: int, resolution: float, origin=(0.0, 0.0)) -> "OccupancyGrid":
        return cls(resolution, np.zeros((height, width), dtype=bool), np.asarray(origin, float))

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    def world_to_cell(self, p) -> tuple[int, int]:
        q = (np.asarray(p, dtype=float) - self.origin) / self.resolution
        return int(math.floor(q[0])), int(math.floor(q[1]))

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return self.origin + self.resolution * np.array([ix + 0.5, iy + 0.5])

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_free(self, ix: int, iy: int) -> bool:
        return self.in_bounds(ix, iy) and not self.occupancy[iy, ix]


def _supercover_cells(a: np.ndarray, b: np.ndarray) -> set[tuple[int, int]]:
    """All grid cells whose closed unit square the segment [a, b] touches.

    Coordinates are in cell units. Points exactly on gridlines or corners
    count as touching every adjacent cell (conservative).
    """
    d = b - a
    seg_len = float(np.hypot(d[0], d[1]))
    ts = {0.0, 1.0}
    if seg_len > _GRIDLINE_EPS:
        for axis in (0, 1):
            if abs(d[axis]) > _GRIDLINE_EPS:
                lo, hi = sorted((a[axis], b[axis]))
                for k in range(math.ceil(lo - _GRIDLINE_EPS), math.floor(hi + _GRIDLINE_EPS) + 1):
                    t = (k - a[axis]) / d[axis]
                    if -_GRIDLINE_EPS <= t <= 1.0 + _GRIDLINE_EPS:
                        ts.add(min(max(t, 0.0), 1.0))
    ts = sorted(ts)
    cells: set[tuple[int, int]] = set()
    for t0, t1 in zip(ts[:-1], ts[1:]):
        if t1 - t0 <= 1e-14:
            continue
        mid = a + 0.5 * (t0 + t1) * d
        cells.add((int(math.floor(mid[0])), int(math.floor(mid[1]))))
    # pad cells touched only at gridline crossings (incl. the endpoints)
    for t in ts:
        p = a + t * d
        kx, ky = round(p[0]), round(p[1])
        near_x = abs(p[0] - kx) < _GRIDLINE_EPS
        near_y = abs(p[1] - ky) < _GRIDLINE_EPS
        if near_x and near_y:
            for dx in (-1, 0):
                for dy in (-1, 0):
                    cells.add((kx + dx, ky + dy))
        elif near_x:
            cy = int(math.floor(p[1]))
            cells.add((kx - 1, cy))
            cells.add((kx, cy))
        elif near_y:
            cx = int(math.floor(p[0]))
            cells.add((cx, ky - 1))
            cells.add((cx, ky))
    return cells


def line_of_sight(grid: OccupancyGrid, p, q) -> bool:
    """Whether the world segment [p, q] crosses only free, in-bounds cells."""
    a = (np.asarray(p, dtype=float) - grid.origin) / grid.resolution
    b = (np.asarray(q, dtype=float) - grid.origin) / grid.resolution
    return all(grid.is_free(ix, iy) for ix, iy in _supercover_cells(a, b))


@dataclass(frozen=True)
class PathPolyline:
    """Ordered world-frame waypoints with line-of-sight between neighbors."""

    waypoints: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 2 or w.shape[0] < 1:
            raise ValueError("waypoints must be a (K, 2) array")
        w.flags.writeable = False
        object.__setattr__(self, "waypoints", w)

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)))


_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def theta_star(grid: OccupancyGrid, start, goal) -> PathPolyline | None:
    """Any-angle path from start to goal on the grid, or None if unreachable.

    Theta* with a supercover line-of-sight test: each expansion tries to
    rewire the neighbor directly to the current node's parent. Heap ties are
    broken by smaller cost-to-come and then by cell coordinates, which makes
    the search deterministic.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    start_cell = grid.world_to_cell(start)
    goal_cell = grid.world_to_cell(goal)
    for name, cell in (("start", start_cell), ("goal", goal_cell)):
        if not grid.is_free(*cell):
            raise ValueError(f"{name} cell {cell} is occupied or out of bounds")

    def center(cell):
        return grid.cell_center(*cell)

    def los(c1, c2):
        return line_of_sight(grid, center(c1), center(c2))

    def dist(c1, c2):
        return math.hypot(c1[0] - c2[0], c1[1] - c2[1]) * grid.resolution

    def heuristic(cell):
        return dist(cell, goal_cell)

    g_score = {start_cell: 0.0}
    parent = {start_cell: start_cell}
    closed: set[tuple[int, int]] = set()
    heap: list[tuple[float, float, tuple[int, int]]] = []
    heapq.heappush(heap, (heuristic(start_cell), 0.0, start_cell))

    found = False
    while heap:
        _, g, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        closed.add(cell)
        if cell == goal_cell:
            found = True
            break
        par = parent[cell]
        for dx, dy in _NEIGHBORS:
            nb = (cell[0] + dx, cell[1] + dy)
            if nb in closed or not grid.is_free(*nb):
                continue
            if los(par, nb):
                cand_g = g_score[par] + dist(par, nb)
                cand_parent = par
            elif los(cell, nb):
                cand_g = g + dist(cell, nb)
                cand_parent = cell
            else:
                continue
            if cand_g < g_score.get(nb, math.inf) - 1e-12:
                g_score[nb] = cand_g
                parent[nb] = cand_parent
                heapq.heappush(heap, (cand_g + heuristic(nb), cand_g, nb))
    if not found:
        return None

    chain = [goal_cell]
    while chain[-1] != start_cell:
        chain.append(parent[chain[-1]])
    chain.reverse()

    waypoints = [start] + [center(c) for c in chain] + [goal]
    # drop redundant vertices while preserving pairwise line of sight
    pruned = [waypoints[0]]
    for wp in waypoints[1:]:
        while (
            len(pruned) >= 2
            and line_of_sight(grid, pruned[-2], wp)
        ):
            pruned.pop()
        if np.linalg.norm(wp - pruned[-1]) > 1e-12:
            pruned.append(wp)
    if len(pruned) == 1:
        pruned.append(pruned[0] + 0.0)
    return PathPolyline(np.array(pruned))


class SmoothPath:
    """Natural cubic spline through waypoints, queried by arc length."""

    def __init__(self, waypoints: np.ndarray):
        pts = np.asarray(waypoints, dtype=float).reshape(-1, 2)
        keep = [0]
        for i in range(1, pts.shape[0]):
            if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-9:
                keep.append(i)
        pts = pts[keep]
        self._degenerate = pts.shape[0] < 2
        if self._degenerate:
            self._point = pts[0]
            self.arc_length = 0.0
            return
        chord = np.concatenate(
            [[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))]
        )
        self._spline_x = CubicSpline(chord, pts[:, 0], bc_type="natural")
        self._spline_y = CubicSpline(chord, pts[:, 1], bc_type="natural")
        samples = max(64 * pts.shape[0], 512)
        self._params = np.linspace(0.0, chord[-1], samples)
        xy = np.column_stack([self._spline_x(self._params), self._spline_y(self._params)])
        seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
        self._arcs = np.concatenate([[0.0], np.cumsum(seg)])
        self.arc_length = float(self._arcs[-1])

    @property
    def is_degenerate(self) -> bool:
        return self._degenerate

    def _param_at(self, s: float) -> float:
        return float(np.interp(s, self._arcs, self._params))

    def point_at(self, s: float) -> np.ndarray:
        if self._degenerate:
            return self._point.copy()
        t = self._param_at(s)
        return np.array([float(self._spline_x(t)), float(self._spline_y(t))])

    def heading_at(self, s: float) -> float:
        """Tangent angle of the curve at arc length s."""
        if self._degenerate:
            return 0.0
        t = self._param_at(s)
        dx = float(self._spline_x(t, 1))
        dy = float(self._spline_y(t, 1))
        if abs(dx) < 1e-12 and abs(dy) < 1e-12:
            return 0.0
        return math.atan2(dy, dx)

    def curvature_at(self, s: float) -> float:
        if self._degenerate:
            return 0.0
        t = self._param_at(s)
        dx, dy = float(self._spline_x(t, 1)), float(self._spline_y(t, 1))
        ddx, ddy = float(self._spline_x(t, 2)), float(self._spline_y(t, 2))
        speed_sq = dx * dx + dy * dy
        if speed_sq < 1e-12:
            return 0.0
        return (dx * ddy - dy * ddx) / speed_sq**1.5


def segment_and_fit(path: PathPolyline, current_position, lookahead: float) -> SmoothPath:
    """Clip the polyline to a lookahead window and fit a smooth curve.

    The window starts at the point of the polyline closest to the current
    position and extends ``lookahead`` meters of arc length (clamped at the
    goal); a natural cubic spline through the clipped waypoints is returned.
    """
    if lookahead <= 0.0:
        raise ValueError("lookahead must be positive")
    p = np.asarray(current_position, dtype=float)
    pts = path.waypoints
    if pts.shape[0] == 1:
        return SmoothPath(pts)
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])

    best = (math.inf, 0.0, pts[0])
    for i in range(pts.shape[0] - 1):
        a, b = pts[i], pts[i + 1]
        seg = b - a
        seg_len_sq = float(seg @ seg)
        t = 0.0 if seg_len_sq < 1e-18 else min(max(float((p - a) @ seg) / seg_len_sq, 0.0), 1.0)
        candidate = a + t * seg
        d = float(np.linalg.norm(p - candidate))
        if d < best[0] - 1e-12:
            best = (d, cum[i] + t * math.sqrt(seg_len_sq), candidate)
    _, s0, entry = best
    s_end = min(s0 + lookahead, float(cum[-1]))

    window = [entry]
    for i in range(pts.shape[0]):
        if s0 < cum[i] < s_end:
            window.append(pts[i])
    # interpolated endpoint at the exact window end
    j = int(np.searchsorted(cum, s_end, side="right") - 1)
    j = min(j, pts.shape[0] - 2)
    seg = pts[j + 1] - pts[j]
    seg_len = float(np.linalg.norm(seg))
    tail = pts[j] + (0.0 if seg_len < 1e-12 else (s_end - cum[j]) / seg_len) * seg
    window.append(tail)
    return SmoothPath(np.array(window))


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Sampled reference: N+1 states, N inputs, and their timestamps."""

    states: np.ndarray
    inputs: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        times = np.asarray(self.times, dtype=float)
        if states.ndim != 2 or states.shape[1] != 5:
            raise ValueError("states must be (N+1, 5)")
        if inputs.shape != (states.shape[0] - 1, 2):
            raise ValueError("inputs must be (N, 2)")
        if times.shape != (states.shape[0],):
            raise ValueError("times must be (N+1,)")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "times", times)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def _trapezoid_profile(length: float, v_max: float, a_max: float, v_start: float):
    """Closed-form arc-length trapezoid: returns (s(t), v(t), total time)."""
    v_s = min(max(v_start, 0.0), v_max)
    v_peak_sq = min(v_max * v_max, a_max * length + 0.5 * v_s * v_s)
    if v_peak_sq < v_s * v_s:
        # cannot both keep the entry speed and stop in time; restart the
        # profile from the highest speed that still allows stopping
        v_s = math.sqrt(max(v_peak_sq, 0.0))
    v_p = math.sqrt(max(v_peak_sq, 0.0))
    t1 = (v_p - v_s) / a_max
    s1 = (v_p * v_p - v_s * v_s) / (2.0 * a_max)
    s3 = v_p * v_p / (2.0 * a_max)
    t3 = v_p / a_max
    s2 = max(length - s1 - s3, 0.0)
    t2 = s2 / v_p if v_p > 0.0 else 0.0
    total = t1 + t2 + t3

    def s_of(t: float) -> float:
        if t <= 0.0:
            return 0.0
        if t < t1:
            return v_s * t + 0.5 * a_max * t * t
        if t < t1 + t2:
            return s1 + v_p * (t - t1)
        if t < total:
            tau = t - t1 - t2
            return s1 + s2 + v_p * tau - 0.5 * a_max * tau * tau
        return length

    def v_of(t: float) -> float:
        if t < 0.0:
            return v_s
        if t < t1:
            return v_s + a_max * t
        if t < t1 + t2:
            return v_p
        if t < total:
            return max(v_p - a_max * (t - t1 - t2), 0.0)
        return 0.0

    return s_of, v_of, total


def time_parameterize(
    curve: SmoothPath,
    v_max: float,
    a_max: float,
    dt: float,
    N: int,
    v_start: float = 0.0,
    fallback_heading: float = 0.0,
) -> ReferenceTrajectory:
    """Sample a trapezoidal velocity profile along the curve.

    Accelerate at a_max, cruise at v_max, decelerate to rest at the end of
    the curve; a stand-in for time-optimal path tracking. Headings are the
    curve tangents (unwrapped), angular rate is curvature times speed, and
    the reference inputs are the finite differences of (v, omega). Past the
    end of the profile the reference is stationary at the final point.
    """
    if v_max <= 0.0 or a_max <= 0.0:
        raise ValueError("v_max and a_max must be positive")
    if dt <= 0.0 or N < 1:
        raise ValueError("dt must be positive and N >= 1")
    length = curve.arc_length
    times = dt * np.arange(N + 1)
    states = np.zeros((N + 1, 5))
    if length < 1e-9:
        point = curve.point_at(0.0)
        states[:, 0:2] = point
        states[:, 2] = fallback_heading
        return ReferenceTrajectory(states, np.zeros((N, 2)), times)

    s_of, v_of, _ = _trapezoid_profile(length, v_max, a_max, v_start)
    prev_theta = None
    for k, t in enumerate(times):
        s = s_of(float(t))
        v = v_of(float(t))
        point = curve.point_at(s)
        theta = curve.heading_at(s)
        if prev_theta is not None:
            theta += 2.0 * math.pi * round((prev_theta - theta) / (2.0 * math.pi))
        prev_theta = theta
        omega = curve.curvature_at(s) * v
        states[k] = [point[0], point[1], theta, v, omega]
    inputs = np.diff(states[:, 3:5], axis=0) / dt
    return ReferenceTrajectory(states, inputs, times)
