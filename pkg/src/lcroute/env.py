"""Deterministic 2D crowd-navigation world.

The robot follows a waypoint route through a corridor populated by pedestrians
that walk in straight lines and bounce off the arena walls. Sensing is a fan of
range rays over the forward half-plane plus the ego-frame offset to the next
waypoint.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .routes import polyline_length

DENSITY_PRESETS = {"low": 5, "medium": 15, "high": 30, "crowd": 70}

SPAWN_CLEARANCE = 2.0
HALT_DISTANCE = 2.0
HALT_HALF_ANGLE = math.radians(30.0)


@dataclass
class WorldConfig:
    route: list = field(default_factory=lambda: [(0.0, 0.0), (10.0, 0.0)])
    route_length_max: float = 40.0
    pedestrian_count: int = 0
    pedestrian_speed: tuple = (0.5, 1.2)
    # (xmin, ymin, xmax, ymax); None derives the box from the route plus arena_margin
    arena: tuple | None = None
    arena_margin: float = 6.0
    corridor_halfwidth: float = 4.0
    dt: float = 0.1
    max_steps: int = 1500
    robot_radius: float = 0.4
    pedestrian_radius: float = 0.3
    goal_radius: float = 1.0
    deviation_truncate: float = 3.0
    sensing_range: float = 8.0
    ray_count: int = 16
    d_m: float = 0.3
    m_v: float = 1.5
    expert_speed: float = 1.2
    collision_grace: float = 2.0
    # pedestrians bounce off the robot's personal space like off a wall
    pedestrians_yield: bool = False
    yield_margin: float = 0.5
    geodesic_mode: str = "waypoint"

    def __post_init__(self):
        self.route = [tuple(map(float, p)) for p in self.route]
        self.pedestrian_speed = tuple(map(float, self.pedestrian_speed))
        if self.arena is not None:
            self.arena = tuple(map(float, self.arena))

    def validate(self) -> "WorldConfig":
        if len(self.route) < 2:
            raise ConfigError("route needs at least 2 waypoints")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.deviation_truncate <= self.goal_radius:
            raise ConfigError("deviation_truncate must exceed goal_radius")
        if self.pedestrian_count < 0:
            raise ConfigError("pedestrian_count must be >= 0")
        lo, hi = self.pedestrian_speed
        if not 0 <= lo <= hi:
            raise ConfigError("pedestrian_speed must be an ordered non-negative range")
        if polyline_length(self.route) > self.route_length_max + 1e-9:
            raise ConfigError(f"route longer than route_length_max={self.route_length_max}")
        if self.ray_count < 2:
            raise ConfigError("ray_count must be >= 2")
        if not 0 < self.expert_speed <= self.m_v:
            raise ConfigError("expert_speed must lie in (0, m_v]")
        if self.geodesic_mode not in ("waypoint", "polyline"):
            raise ConfigError(f"unknown geodesic_mode {self.geodesic_mode!r}")
        xmin, ymin, xmax, ymax = self.arena_bounds()
        pts = np.asarray(self.route)
        if (pts[:, 0].min() < xmin or pts[:, 0].max() > xmax
                or pts[:, 1].min() < ymin or pts[:, 1].max() > ymax):
            raise ConfigError("route leaves the arena")
        return self

    def arena_bounds(self) -> tuple:
        if self.arena is not None:
            return self.arena
        pts = np.asarray(self.route, dtype=float)
        m = self.arena_margin
        return (float(pts[:, 0].min() - m), float(pts[:, 1].min() - m),
                float(pts[:, 0].max() + m), float(pts[:, 1].max() + m))


@dataclass
class RobotState:
    position: np.ndarray
    heading: float
    speed: float


@dataclass
class PedestrianState:
    position: np.ndarray
    velocity: np.ndarray


@dataclass
class Observation:
    rays: np.ndarray
    goal: np.ndarray
    speed_norm: float

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rays, self.goal, [self.speed_norm]])


@dataclass
class Action:
    d: float
    v: float


@dataclass
class StepEvents:
    collision: bool = False
    reached_goal: bool = False
    deviated: bool = False
    out_of_steps: bool = False

    def as_dict(self) -> dict:
        return {"collision": self.collision, "reached_goal": self.reached_goal,
                "deviated": self.deviated, "out_of_steps": self.out_of_steps}


@dataclass
class StepOutcome:
    observation: Observation
    d_geo: float
    advanced: float
    events: StepEvents
    done: bool
    collisions: int = 0


@dataclass
class EnvState:
    robot: RobotState
    # pedestrians are held as arrays for speed; see pedestrians() for the typed view
    ped_pos: np.ndarray
    ped_vel: np.ndarray
    ped_hidden: np.ndarray  # remaining grace ticks, 0 = active
    step_index: int
    next_waypoint: int
    meters_traveled: float
    collision_count: int
    rng: np.random.Generator
    mode: str
    route: np.ndarray
    seg_start: np.ndarray
    seg_vec: np.ndarray
    seg_len: np.ndarray
    seg_cum: np.ndarray
    progress_s: float = 0.0
    max_deviation: float = 0.0
    done: bool = False

    def pedestrians(self) -> list[PedestrianState]:
        return [PedestrianState(p.copy(), v.copy())
                for p, v, h in zip(self.ped_pos, self.ped_vel, self.ped_hidden) if h == 0]

    def copy(self) -> "EnvState":
        return copy.deepcopy(self)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def geodesic_distance(position, route, mode: str = "waypoint") -> float:
    """Distance from ``position`` to the route.

    ``waypoint`` mode is the minimum over waypoints; ``polyline`` measures to the
    nearest point on any segment.
    """
    pts = np.asarray(route, dtype=float)
    if len(pts) == 0:
        raise ValueError("route must be non-empty")
    p = np.asarray(position, dtype=float)
    if mode == "waypoint" or len(pts) == 1:
        return float(np.sqrt(((pts - p) ** 2).sum(axis=1)).min())
    a, seg = pts[:-1], np.diff(pts, axis=0)
    l2 = (seg ** 2).sum(axis=1)
    t = np.clip(((p - a) * seg).sum(axis=1) / np.where(l2 > 0, l2, 1.0), 0.0, 1.0)
    near = a + seg * t[:, None]
    return float(np.sqrt(((near - p) ** 2).sum(axis=1)).min())


def _project(state: EnvState, p: np.ndarray) -> float:
    """Arc length of the nearest polyline point, limited to a window ahead of progress."""
    rel = p - state.seg_start
    l2 = state.seg_len ** 2
    t = np.clip((rel * state.seg_vec).sum(axis=1) / np.where(l2 > 0, l2, 1.0), 0.0, 1.0)
    near = state.seg_start + state.seg_vec * t[:, None]
    dist = np.sqrt(((near - p) ** 2).sum(axis=1))
    s = state.seg_cum[:-1] + t * state.seg_len
    # no jumping far ahead along the route through a shortcut
    dist = np.where(s <= state.progress_s + 3.0, dist, np.inf)
    return float(s[int(np.argmin(dist))])


def route_progress(state: EnvState, route=None) -> float:
    """Fraction of route arc length reached so far (monotone within an episode)."""
    total = state.seg_cum[-1]
    return 1.0 if total <= 0 else min(1.0, state.progress_s / total)


def _spawn_point(rng: np.random.Generator, state_like, config: WorldConfig, robot_pos) -> np.ndarray:
    xmin, ymin, xmax, ymax = config.arena_bounds()
    seg_start, seg_vec, seg_len, seg_cum = state_like
    total = seg_cum[-1]
    r = config.pedestrian_radius
    while True:
        s = rng.uniform(0.0, total)
        lat = rng.uniform(-config.corridor_halfwidth, config.corridor_halfwidth)
        i = min(int(np.searchsorted(seg_cum, s, side="right")) - 1, len(seg_len) - 1)
        u = seg_vec[i] / seg_len[i]
        base = seg_start[i] + u * (s - seg_cum[i])
        p = base + lat * np.array([-u[1], u[0]])
        if not (xmin + r <= p[0] <= xmax - r and ymin + r <= p[1] <= ymax - r):
            continue
        if np.hypot(*(p - robot_pos)) < SPAWN_CLEARANCE:
            continue
        return p


def _random_velocity(rng: np.random.Generator, config: WorldConfig) -> np.ndarray:
    ang = rng.uniform(-math.pi, math.pi)
    spd = rng.uniform(*config.pedestrian_speed)
    return spd * np.array([math.cos(ang), math.sin(ang)])


def new_episode(config: WorldConfig, seed: int, mode: str = "train") -> tuple[EnvState, Observation]:
    """Start an episode; fully determined by ``(config, seed, mode)``."""
    if not config.route:
        raise ConfigError("route must be non-empty")
    config.validate()
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = np.random.default_rng(seed)
    pts = np.asarray(config.route, dtype=float)
    seg_vec = np.diff(pts, axis=0)
    seg_len = np.hypot(seg_vec[:, 0], seg_vec[:, 1])
    seg_cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    geom = (pts[:-1], seg_vec, seg_len, seg_cum)
    start = pts[0].copy()
    heading = math.atan2(seg_vec[0, 1], seg_vec[0, 0])
    n = config.pedestrian_count
    ped_pos = np.zeros((n, 2))
    ped_vel = np.zeros((n, 2))
    for i in range(n):
        ped_pos[i] = _spawn_point(rng, geom, config, start)
        ped_vel[i] = _random_velocity(rng, config)
    state = EnvState(
        robot=RobotState(start, wrap_angle(heading), 0.0),
        ped_pos=ped_pos, ped_vel=ped_vel, ped_hidden=np.zeros(n, dtype=int),
        step_index=0, next_waypoint=1, meters_traveled=0.0, collision_count=0,
        rng=rng, mode=mode, route=pts,
        seg_start=pts[:-1], seg_vec=seg_vec, seg_len=seg_len, seg_cum=seg_cum,
    )
    _advance_waypoint(state, config)
    return state, sense(state, config)


def _advance_waypoint(state: EnvState, config: WorldConfig) -> None:
    last = len(state.route) - 1
    p = state.robot.position
    while state.next_waypoint < last and np.hypot(*(state.route[state.next_waypoint] - p)) < config.goal_radius:
        state.next_waypoint += 1


def sense(state: EnvState, config: WorldConfig) -> Observation:
    rng_max = config.sensing_range
    p = state.robot.position
    n = config.ray_count
    bearings = state.robot.heading + (np.arange(n) / (n - 1) - 0.5) * math.pi
    u = np.stack([np.cos(bearings), np.sin(bearings)], axis=1)

    xmin, ymin, xmax, ymax = config.arena_bounds()
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(u[:, 0] > 0, (xmax - p[0]) / u[:, 0],
                      np.where(u[:, 0] < 0, (xmin - p[0]) / u[:, 0], np.inf))
        ty = np.where(u[:, 1] > 0, (ymax - p[1]) / u[:, 1],
                      np.where(u[:, 1] < 0, (ymin - p[1]) / u[:, 1], np.inf))
    dist = np.maximum(np.minimum(tx, ty), 0.0)

    active = state.ped_hidden == 0
    if active.any():
        rel = state.ped_pos[active] - p  # (m, 2)
        tc = u @ rel.T  # (n, m) distance along ray to closest approach
        # perpendicular offset via the cross product; |rel|^2 - tc^2 cancels badly near tangency
        d2 = (u[:, :1] * rel[:, 1][None, :] - u[:, 1:] * rel[:, 0][None, :]) ** 2
        r2 = config.pedestrian_radius ** 2
        hit = (d2 <= r2) & (tc + config.pedestrian_radius >= 0)
        t = tc - np.sqrt(np.maximum(r2 - d2, 0.0))
        t = np.where(hit, np.maximum(t, 0.0), np.inf)
        dist = np.minimum(dist, t.min(axis=1))

    rays = np.clip(dist / rng_max, 0.0, 1.0)
    wp = state.route[state.next_waypoint] - p
    c, s = math.cos(state.robot.heading), math.sin(state.robot.heading)
    ego = np.array([c * wp[0] + s * wp[1], -s * wp[0] + c * wp[1]])
    goal = np.clip(ego / rng_max, -1.0, 1.0)
    return Observation(rays=rays, goal=goal, speed_norm=min(1.0, max(0.0, state.robot.speed / config.m_v)))


def clamp_action(action: Action, config: WorldConfig) -> Action:
    return Action(d=min(config.d_m, max(-config.d_m, float(action.d))),
                  v=min(config.m_v, max(0.0, float(action.v))))


def step(state: EnvState, action: Action, config: WorldConfig) -> StepOutcome:
    """Advance one control tick, mutating ``state`` in place."""
    if state.done:
        raise UsageError("cannot step a finished episode; call new_episode")
    a = clamp_action(action, config)
    robot = state.robot
    robot.heading = wrap_angle(robot.heading + a.d)
    robot.speed = a.v
    delta = a.v * config.dt
    robot.position = robot.position + delta * np.array([math.cos(robot.heading), math.sin(robot.heading)])
    state.meters_traveled += delta

    _move_pedestrians(state, config)

    collisions = 0
    active = state.ped_hidden == 0
    if active.any():
        gap = np.hypot(*(state.ped_pos - robot.position).T)
        hits = np.flatnonzero(active & (gap < config.robot_radius + config.pedestrian_radius))
        collisions = len(hits)
        if collisions and state.mode == "eval":
            grace = max(1, int(round(config.collision_grace / config.dt)))
            state.ped_hidden[hits] = grace
            state.collision_count += collisions
        elif collisions:
            state.collision_count += collisions

    before = state.progress_s
    state.progress_s = max(state.progress_s, _project(state, robot.position))
    _advance_waypoint(state, config)
    state.step_index += 1

    d_geo = geodesic_distance(robot.position, state.route, config.geodesic_mode)
    state.max_deviation = max(state.max_deviation, d_geo)
    events = StepEvents(
        collision=collisions > 0,
        reached_goal=bool(np.hypot(*(state.route[-1] - robot.position)) < config.goal_radius),
        deviated=d_geo > config.deviation_truncate,
        out_of_steps=state.step_index >= config.max_steps,
    )
    if events.reached_goal:
        state.progress_s = float(state.seg_cum[-1])
    done = events.reached_goal or events.deviated or events.out_of_steps
    if state.mode == "train" and events.collision:
        done = True
    state.done = done
    return StepOutcome(observation=sense(state, config), d_geo=d_geo,
                       advanced=state.progress_s - before, events=events, done=done,
                       collisions=collisions)


def _move_pedestrians(state: EnvState, config: WorldConfig) -> None:
    if len(state.ped_pos) == 0:
        return
    xmin, ymin, xmax, ymax = config.arena_bounds()
    r = config.pedestrian_radius
    active = state.ped_hidden == 0
    pos = state.ped_pos
    vel = state.ped_vel
    if config.pedestrians_yield and active.any():
        rel = pos - state.robot.position
        dist = np.hypot(rel[:, 0], rel[:, 1])
        near = active & (dist < config.robot_radius + r + config.yield_margin) & (dist > 0)
        if near.any():
            normal = rel[near] / dist[near, None]
            toward = (vel[near] * normal).sum(axis=1)
            # reflect only the velocity component pointing at the robot
            vel[near] -= 2.0 * np.minimum(toward, 0.0)[:, None] * normal
    pos[active] += vel[active] * config.dt
    for axis, lo, hi in ((0, xmin + r, xmax - r), (1, ymin + r, ymax - r)):
        below = active & (pos[:, axis] < lo)
        above = active & (pos[:, axis] > hi)
        pos[below, axis] = 2 * lo - pos[below, axis]
        pos[above, axis] = 2 * hi - pos[above, axis]
        vel[below | above, axis] *= -1.0

    hidden = np.flatnonzero(state.ped_hidden > 0)
    if len(hidden):
        state.ped_hidden[hidden] -= 1
        geom = (state.seg_start, state.seg_vec, state.seg_len, state.seg_cum)
        for i in hidden:
            if state.ped_hidden[i] == 0:
                pos[i] = _spawn_point(state.rng, geom, config, state.robot.position)
                vel[i] = _random_velocity(state.rng, config)


def expert_action(state: EnvState, config: WorldConfig) -> Action:
    """Waypoint-following heuristic that stops while a pedestrian blocks the way."""
    wp = state.route[state.next_waypoint] - state.robot.position
    bearing = wrap_angle(math.atan2(wp[1], wp[0]) - state.robot.heading)
    d = min(config.d_m, max(-config.d_m, bearing))
    v = config.expert_speed
    active = state.ped_hidden == 0
    if active.any():
        rel = state.ped_pos[active] - state.robot.position
        dist = np.hypot(rel[:, 0], rel[:, 1])
        ang = np.arctan2(rel[:, 1], rel[:, 0]) - state.robot.heading
        ang = (ang + math.pi) % (2 * math.pi) - math.pi
        if np.any((dist <= HALT_DISTANCE) & (np.abs(ang) <= HALT_HALF_ANGLE)):
            v = 0.0
    return Action(d=d, v=v)
