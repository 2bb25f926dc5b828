"""First-order differential-drive robot on an occupancy grid.

Pose updates are explicit Euler steps of the unicycle model. The LIDAR marches
discrete Bresenham lines through the grid and counts free cells. Cells outside
the grid are treated as free; leaving the boundary box is handled by the reward
and termination logic, not by the sensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import NamedTuple

import numpy as np

GOAL_REWARD = 100.0
COLLISION_REWARD = -100.0
BOUNDARY_REWARD = -10.0

EVENTS = ("none", "goal", "collision", "out_of_bounds", "timeout")


class ConfigError(ValueError):
    pass


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(theta, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0


@dataclass(frozen=True)
class Action:
    v: float
    omega: float


@dataclass(frozen=True)
class WorldConfig:
    start: Pose = Pose(0.0, 0.0, 0.0)
    goal: tuple[float, float] = (5.0, 0.0)
    # axis-aligned rectangles (x_min, y_min, x_max, y_max) in meters
    obstacles: tuple[tuple[float, float, float, float], ...] = ((1.5, -0.4, 1.9, 0.2),)
    boundary_margin: float = 1.0
    goal_threshold: float = 0.1
    dt: float = 0.1
    resolution: float = 0.05
    n_beams: int = 16
    max_range: int = 20
    max_steps: int = 200
    v_max: float = 0.22
    omega_max: float = 2.84
    start_noise: float = 0.0
    heading_noise: float = 0.0
    # "normalized" sums beam counts / max_range, "raw" sums the counts themselves
    lidar_reward: str = "normalized"

    def __post_init__(self):
        start = self.start if isinstance(self.start, Pose) else Pose(*self.start)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))
        object.__setattr__(
            self, "obstacles", tuple(tuple(float(c) for c in ob) for ob in self.obstacles)
        )
        if len(self.goal) != 2:
            raise ConfigError("goal must be (x, y)")
        for ob in self.obstacles:
            if len(ob) != 4 or ob[0] > ob[2] or ob[1] > ob[3]:
                raise ConfigError(f"bad obstacle rectangle {ob}")
        for name in ("goal_threshold", "dt", "resolution", "v_max", "omega_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_beams < 1 or self.max_range < 1 or self.max_steps < 1:
            raise ConfigError("n_beams, max_range and max_steps must be >= 1")
        if self.boundary_margin < 0 or self.start_noise < 0 or self.heading_noise < 0:
            raise ConfigError("boundary_margin and noise levels must be non-negative")
        if self.lidar_reward not in ("normalized", "raw"):
            raise ConfigError("lidar_reward must be 'normalized' or 'raw'")

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        m = self.boundary_margin
        xs = (self.start.x, self.goal[0])
        ys = (self.start.y, self.goal[1])
        return (min(xs) - m, min(ys) - m, max(xs) + m, max(ys) + m)

    @property
    def obs_dim(self) -> int:
        return 2 + self.n_beams

    @property
    def grid(self) -> "OccupancyGrid":
        return _build_grid(self.bounds, self.resolution, self.obstacles)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    origin: tuple[float, float]
    resolution: float
    occupied: np.ndarray = field(repr=False)  # shape (nx, ny), indexed [i, j]

    def cell(self, x: float, y: float) -> tuple[int, int]:
        return (
            math.floor((x - self.origin[0]) / self.resolution),
            math.floor((y - self.origin[1]) / self.resolution),
        )

    def is_occupied(self, i: int, j: int) -> bool:
        nx, ny = self.occupied.shape
        return 0 <= i < nx and 0 <= j < ny and bool(self.occupied[i, j])


@lru_cache(maxsize=64)
def _build_grid(bounds, resolution, obstacles) -> OccupancyGrid:
    x0, y0, x1, y1 = bounds
    nx = max(1, math.ceil((x1 - x0) / resolution))
    ny = max(1, math.ceil((y1 - y0) / resolution))
    occ = np.zeros((nx, ny), dtype=bool)
    for xa, ya, xb, yb in obstacles:
        i0 = max(0, math.floor((xa - x0) / resolution))
        j0 = max(0, math.floor((ya - y0) / resolution))
        i1 = min(nx - 1, math.floor((xb - x0) / resolution))
        j1 = min(ny - 1, math.floor((yb - y0) / resolution))
        if i0 <= i1 and j0 <= j1:
            occ[i0 : i1 + 1, j0 : j1 + 1] = True
    occ.setflags(write=False)
    return OccupancyGrid((x0, y0), resolution, occ)


@lru_cache(maxsize=4096)
def bresenham(dx: int, dy: int) -> np.ndarray:
    """Cells on the discrete line from (0, 0) to (dx, dy), start cell excluded."""
    x = y = 0
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    adx, ady = abs(dx), abs(dy)
    err = adx - ady
    pts = []
    while (x, y) != (dx, dy):
        e2 = 2 * err
        if e2 > -ady:
            err -= ady
            x += sx
        if e2 < adx:
            err += adx
            y += sy
        pts.append((x, y))
    out = np.array(pts, dtype=np.int64).reshape(-1, 2)
    out.setflags(write=False)
    return out


def beam_offsets(theta: float, n_beams: int, max_range: int) -> np.ndarray:
    """``(n_beams, max_range, 2)`` cell offsets; beam k points at theta + 2*pi*k/n_beams.

    Each beam ends on the square of Chebyshev radius ``max_range``, so every
    line visits exactly ``max_range`` cells.
    """
    out = np.empty((n_beams, max_range, 2), dtype=np.int64)
    for k in range(n_beams):
        phi = theta + 2.0 * math.pi * k / n_beams
        c, s = math.cos(phi), math.sin(phi)
        m = max(abs(c), abs(s))
        out[k] = bresenham(round(max_range * c / m), round(max_range * s / m))
    return out


def scan_grid(occupied: np.ndarray, cell: tuple[int, int], theta: float,
              n_beams: int, max_range: int) -> np.ndarray:
    """Free-cell count along each beam before the first occupied cell."""
    cells = beam_offsets(theta, n_beams, max_range) + np.asarray(cell)
    i, j = cells[..., 0], cells[..., 1]
    nx, ny = occupied.shape
    inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
    hit = np.zeros(i.shape, dtype=bool)
    hit[inside] = occupied[i[inside], j[inside]]
    return np.where(hit.any(axis=1), hit.argmax(axis=1), max_range).astype(np.int64)


def lidar_scan(pose: Pose, world: WorldConfig) -> np.ndarray:
    grid = world.grid
    return scan_grid(grid.occupied, grid.cell(pose.x, pose.y), pose.theta,
                     world.n_beams, world.max_range)


class TrackErrors(NamedTuple):
    cte: float
    ate: float
    he: float


def goal_distance(pose: Pose, goal) -> float:
    return math.hypot(goal[0] - pose.x, goal[1] - pose.y)


def track_errors(pose: Pose, goal) -> TrackErrors:
    dx, dy = goal[0] - pose.x, goal[1] - pose.y
    d = math.hypot(dx, dy)
    heading_to_goal = math.atan2(dy, dx) if d > 0.0 else 0.0
    return TrackErrors(
        cte=d * math.sin(heading_to_goal - pose.theta),
        ate=abs(dx) + abs(dy),
        he=wrap_angle(heading_to_goal - pose.theta),
    )


@dataclass(frozen=True, eq=False)
class Observation:
    goal_distance: float
    heading_error: float
    lidar: np.ndarray  # counts / max_range, in [0, 1]

    def vector(self) -> np.ndarray:
        return np.concatenate(([self.goal_distance, self.heading_error], self.lidar))


def observe(pose: Pose, world: WorldConfig, counts: np.ndarray | None = None) -> Observation:
    if counts is None:
        counts = lidar_scan(pose, world)
    return Observation(
        goal_distance(pose, world.goal),
        track_errors(pose, world.goal).he,
        counts / world.max_range,
    )


def is_collision(pose: Pose, world: WorldConfig) -> bool:
    grid = world.grid
    return grid.is_occupied(*grid.cell(pose.x, pose.y))


def is_out_of_bounds(pose: Pose, world: WorldConfig) -> bool:
    x0, y0, x1, y1 = world.bounds
    return not (x0 <= pose.x <= x1 and y0 <= pose.y <= y1)


def at_goal(pose: Pose, world: WorldConfig) -> bool:
    thr = world.goal_threshold
    return abs(pose.x - world.goal[0]) <= thr and abs(pose.y - world.goal[1]) <= thr


def classify(pose: Pose, world: WorldConfig) -> str:
    """Terminal event at ``pose``; goal beats collision beats boundary."""
    if at_goal(pose, world):
        return "goal"
    if is_collision(pose, world):
        return "collision"
    if is_out_of_bounds(pose, world):
        return "out_of_bounds"
    return "none"


def reward_fn(pose: Pose, event: str, errors: TrackErrors, lidar) -> float:
    """Step reward. ``lidar`` holds whatever the world's lidar reward term sums
    (normalized or raw counts); the heading error enters by magnitude."""
    if event == "goal":
        return GOAL_REWARD
    if event == "collision":
        return COLLISION_REWARD
    if event == "out_of_bounds":
        return BOUNDARY_REWARD
    cte, ate, he = errors
    return -(cte * cte + ate + abs(he)) + float(np.sum(lidar))


def clamp_action(action: Action, world: WorldConfig) -> Action:
    return Action(
        min(max(action.v, 0.0), world.v_max),
        min(max(action.omega, -world.omega_max), world.omega_max),
    )


def action_from_unit(u, world: WorldConfig) -> Action:
    """Map a point of [-1, 1]^2 (policy space) to physical velocities."""
    u0 = min(max(float(u[0]), -1.0), 1.0)
    u1 = min(max(float(u[1]), -1.0), 1.0)
    return Action(0.5 * (u0 + 1.0) * world.v_max, u1 * world.omega_max)


def action_to_unit(action: Action, world: WorldConfig) -> np.ndarray:
    a = clamp_action(action, world)
    return np.array([2.0 * a.v / world.v_max - 1.0, a.omega / world.omega_max])


class StepResult(NamedTuple):
    pose: Pose
    obs: Observation
    reward: float
    done: bool
    event: str


def kinematics(pose: Pose, action: Action, dt: float) -> Pose:
    return Pose(
        pose.x + dt * action.v * math.cos(pose.theta),
        pose.y + dt * action.v * math.sin(pose.theta),
        wrap_angle(pose.theta + dt * action.omega),
    )


def step(pose: Pose, action: Action, world: WorldConfig, steps_taken: int = 0) -> StepResult:
    """Advance one step. ``steps_taken`` counts steps before this one and drives timeouts."""
    new = kinematics(pose, clamp_action(action, world), world.dt)
    counts = lidar_scan(new, world)
    obs = observe(new, world, counts)
    event = classify(new, world)
    if event == "none" and steps_taken + 1 >= world.max_steps:
        event = "timeout"
    lidar_term = counts / world.max_range if world.lidar_reward == "normalized" else counts
    r = reward_fn(new, event, track_errors(new, world.goal), lidar_term)
    return StepResult(new, obs, r, event != "none", event)


def reset(world: WorldConfig, rng: np.random.Generator | None = None) -> tuple[Pose, Observation]:
    s = world.start
    if rng is not None and (world.start_noise > 0 or world.heading_noise > 0):
        jx, jy = rng.uniform(-world.start_noise, world.start_noise, size=2)
        jt = rng.uniform(-world.heading_noise, world.heading_noise)
        s = Pose(s.x + jx, s.y + jy, wrap_angle(s.theta + jt))
    if is_collision(s, world):
        raise ConfigError(f"start pose {s} lies inside an obstacle")
    return s, observe(s, world)


class NavEnv:
    """Stateful wrapper: one episode at a time, actions in physical units."""

    def __init__(self, world: WorldConfig):
        self.world = world
        self.pose: Pose | None = None
        self.t = 0
        self.done = True

    def reset(self, rng: np.random.Generator | None = None) -> Observation:
        self.pose, obs = reset(self.world, rng)
        self.t = 0
        self.done = False
        return obs

    def step(self, action: Action) -> StepResult:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        res = step(self.pose, action, self.world, self.t)
        self.pose = res.pose
        self.t += 1
        self.done = res.done
        return res


def with_overrides(world: WorldConfig, **kw) -> WorldConfig:
    return replace(world, **kw)
