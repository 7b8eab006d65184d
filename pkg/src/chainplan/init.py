"""Initial trajectories for the optimizer: stationary, interpolated, and
grid-search seeded.

The grid world is a 2D occupancy map of the arena; obstacles are projected
to the ground plane and inflated by a robot-footprint radius. The search is
8-connected A* with octile heuristic and unit/sqrt(2) step costs, no corner
cutting, deterministic tie-breaking (lower heuristic first, then row-major
cell order).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from math import atan2, hypot, sqrt

import numpy as np

from .geometry import PosedShape
from .model import CAPSULE, SPHERE

SQRT2 = sqrt(2.0)

STRATEGIES = ("stationary", "interpolated", "astar")


class NoPathError(RuntimeError):
    """Start and goal are not connected on the grid."""


@dataclass
class GridMap:
    width: int                 # cells along x
    height: int                # cells along y
    resolution: float          # m per cell
    origin: np.ndarray         # world xy of the (0, 0) cell corner
    occupancy: np.ndarray      # bool, shape (width, height), True = blocked
    inflation: float = 0.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(2)
        if self.resolution <= 0:
            raise ValueError("grid resolution must be positive")
        if self.occupancy.shape != (self.width, self.height):
            raise ValueError("occupancy shape does not match width/height")

    def world_to_cell(self, x, y):
        return (int(np.floor((x - self.origin[0]) / self.resolution)),
                int(np.floor((y - self.origin[1]) / self.resolution)))

    def cell_center(self, cell):
        return self.origin + (np.asarray(cell, dtype=float) + 0.5) * self.resolution

    def in_bounds(self, cell):
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def free(self, cell):
        return self.in_bounds(cell) and not self.occupancy[cell[0], cell[1]]


def _convex_hull_2d(points):
    """Andrew monotone chain; points (N, 2) -> hull vertices, CCW."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=float)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=float)


def _footprint_distance(shape: PosedShape, X, Y):
    """2D distance from query points to the shape's ground-plane footprint."""
    kind = shape.shape.kind
    P = np.stack([X, Y], axis=-1)
    if kind == SPHERE:
        c, r = shape.prep
        return np.hypot(X - c[0], Y - c[1]) - r
    if kind == CAPSULE:
        p0, p1, r = shape.prep
        a, b = p0[:2], p1[:2]
        d = b - a
        dd = float(d @ d)
        if dd < 1e-16:
            return np.hypot(X - a[0], Y - a[1]) - r
        t = np.clip(((P - a) @ d) / dd, 0.0, 1.0)
        proj = a + t[..., None] * d
        return np.linalg.norm(P - proj, axis=-1) - r
    # box: distance to the convex hull of the projected corners
    c, R, h = shape.prep
    corners = np.array([[sx * h[0], sy * h[1], sz * h[2]]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    world = (R @ corners.T).T + c
    hull = _convex_hull_2d(world[:, :2])
    if hull.shape[0] < 3:
        a, b = hull[0], hull[-1]
        d = b - a
        dd = float(d @ d) or 1.0
        t = np.clip(((P - a) @ d) / dd, 0.0, 1.0)
        return np.linalg.norm(P - (a + t[..., None] * d), axis=-1)
    dist = np.full(X.shape, np.inf)
    inside = np.ones(X.shape, dtype=bool)
    m = hull.shape[0]
    for i in range(m):
        a, b = hull[i], hull[(i + 1) % m]
        e = b - a
        # distance to edge segment
        dd = float(e @ e) or 1.0
        t = np.clip(((P - a) @ e) / dd, 0.0, 1.0)
        dist = np.minimum(dist, np.linalg.norm(P - (a + t[..., None] * e), axis=-1))
        # CCW hull: inside iff left of every edge
        crossed = e[0] * (Y - a[1]) - e[1] * (X - a[0])
        inside &= crossed >= 0.0
    return np.where(inside, -dist, dist)


def rasterize_environment(shapes, resolution, inflation, extent) -> GridMap:
    """Occupancy grid over `extent` = ((lo_x, lo_y), (hi_x, hi_y)).

    A cell is occupied iff its center lies within `inflation` of any
    obstacle footprint projected to the ground plane.
    """
    (lo_x, lo_y), (hi_x, hi_y) = extent
    width = max(int(round((hi_x - lo_x) / resolution)), 1)
    height = max(int(round((hi_y - lo_y) / resolution)), 1)
    xs = lo_x + (np.arange(width) + 0.5) * resolution
    ys = lo_y + (np.arange(height) + 0.5) * resolution
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    occ = np.zeros((width, height), dtype=bool)
    for shape in shapes:
        occ |= _footprint_distance(shape, X, Y) <= inflation
    return GridMap(width, height, resolution, np.array([lo_x, lo_y]), occ,
                   inflation=inflation)


def astar_path(grid: GridMap, start, goal):
    """Shortest 8-connected path as an optimal-cost cell list.

    Costs are 1 per axial step and sqrt(2) per diagonal; the octile
    heuristic keeps the search admissible. Diagonal moves crossing a blocked
    orthogonal neighbor are forbidden (no corner cutting).
    """
    start, goal = tuple(start), tuple(goal)
    for name, cell in (("start", start), ("goal", goal)):
        if not grid.free(cell):
            raise NoPathError(f"{name} cell {cell} is not free")

    def octile(c):
        dx, dy = abs(c[0] - goal[0]), abs(c[1] - goal[1])
        return max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy)

    w = grid.width
    open_heap = [(octile(start), octile(start), start[1] * w + start[0], start)]
    g_cost = {start: 0.0}
    came = {start: None}
    closed = set()
    while open_heap:
        _, _, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal:
            path = []
            while cur is not None:
                path.append(cur)
                cur = came[cur]
            path.reverse()
            return path, g_cost[goal]
        closed.add(cur)
        cx, cy = cur
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                nxt = (cx + dx, cy + dy)
                if not grid.free(nxt):
                    continue
                if dx != 0 and dy != 0:
                    if not (grid.free((cx + dx, cy)) and grid.free((cx, cy + dy))):
                        continue
                    step = SQRT2
                else:
                    step = 1.0
                ng = g_cost[cur] + step
                if ng < g_cost.get(nxt, np.inf) - 1e-12:
                    g_cost[nxt] = ng
                    came[nxt] = cur
                    h = octile(nxt)
                    heapq.heappush(open_heap, (ng + h, h, nxt[1] * w + nxt[0], nxt))
    raise NoPathError(f"no path from {start} to {goal}")


def stationary_init(q_init, T) -> np.ndarray:
    """Every waypoint equals the initial configuration."""
    if T < 2:
        raise ValueError("need at least two waypoints")
    return np.tile(np.asarray(q_init, dtype=float), (T, 1))


def interpolated_init(q_init, q_seed_goal, T) -> np.ndarray:
    """Linear interpolation from the initial to a seed goal configuration."""
    q_init = np.asarray(q_init, dtype=float)
    q_goal = np.asarray(q_seed_goal, dtype=float)
    if q_init.shape != q_goal.shape:
        raise ValueError("start/goal dimension mismatch")
    if T < 2:
        raise ValueError("need at least two waypoints")
    alphas = np.linspace(0.0, 1.0, T)[:, None]
    return q_init[None, :] * (1.0 - alphas) + q_goal[None, :] * alphas


def _resample_polyline(points, T):
    """T points uniformly spaced by arc length along a polyline."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-12])
    pts = pts[keep]
    if pts.shape[0] == 1:
        return np.tile(pts[0], (T, 1))
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], T)
    out = np.empty((T, pts.shape[1]))
    j = 0
    for i, st in enumerate(targets):
        while j < len(seg) - 1 and s[j + 1] < st:
            j += 1
        denom = seg[j] if seg[j] > 1e-12 else 1.0
        a = (st - s[j]) / denom
        out[i] = pts[j] * (1.0 - a) + pts[j + 1] * a
    return out


def unwrap_to(prev, angle):
    """Shift `angle` by multiples of 2*pi to land within pi of `prev`."""
    while angle - prev > np.pi:
        angle -= 2.0 * np.pi
    while angle - prev < -np.pi:
        angle += 2.0 * np.pi
    return angle


def astar_init(grid: GridMap, q_init, base_goal_xy, T, q_seed_goal=None) -> np.ndarray:
    """Grid-searched base path lifted to a full-body initial trajectory.

    The first three coordinates must be the virtual-base x/y/yaw. Base x/y
    follow the A* path resampled uniformly by arc length, yaw follows the
    path tangent (unwrapped from the initial yaw), remaining joints
    interpolate linearly toward the seed goal.
    """
    q_init = np.asarray(q_init, dtype=float)
    if q_seed_goal is None:
        q_seed_goal = q_init
    q_seed_goal = np.asarray(q_seed_goal, dtype=float)
    start_cell = grid.world_to_cell(q_init[0], q_init[1])
    goal_cell = grid.world_to_cell(base_goal_xy[0], base_goal_xy[1])
    cells, _ = astar_path(grid, start_cell, goal_cell)
    poly = [q_init[:2]]
    poly += [grid.cell_center(c) for c in cells[1:-1]]
    poly.append(np.asarray(base_goal_xy[:2], dtype=float))
    xy = _resample_polyline(poly, T)
    Q = interpolated_init(q_init, q_seed_goal, T)
    Q[:, 0] = xy[:, 0]
    Q[:, 1] = xy[:, 1]
    yaw = np.empty(T)
    yaw[0] = q_init[2]
    for t in range(1, T):
        d = xy[t] - xy[t - 1]
        if hypot(d[0], d[1]) > 1e-9:
            yaw[t] = unwrap_to(yaw[t - 1], atan2(d[1], d[0]))
        else:
            yaw[t] = yaw[t - 1]
    Q[:, 2] = yaw
    Q[0] = q_init
    return Q
