"""Deterministic 2D point-robot navigation environment.

A second-order unicycle (acceleration + turn-rate inputs, both scaled to
[-1, 1]) moves in a square arena containing a goal circle and circular
obstacles of two kinds: hazards (trespassable, penetration-depth cost)
and pillars (rigid, unit contact cost). All operations are pure
functions of their inputs plus an explicit seeded random stream, and the
one-step transition is exposed in batched form (`lookahead`) so a safety
filter can query it as a black box.

Reward per step is the decrease in goal distance plus a unit bonus on
reaching the goal; on success the goal respawns elsewhere and the stored
previous-distance is re-based so the respawn step carries no teleport
artifact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi

HAZARD = "hazard"
PILLAR = "pillar"


class ContractViolationError(ValueError):
    """An operation was called with inputs violating its preconditions."""


class PlacementError(RuntimeError):
    """Rejection sampling could not place all objects (arena too crowded)."""


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    return (theta + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class Obstacle:
    kind: str
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.kind not in (HAZARD, PILLAR):
            raise ContractViolationError(f"unknown obstacle kind {self.kind!r}")
        if not self.radius > 0.0:
            raise ContractViolationError("obstacle radius must be positive")


@dataclass(frozen=True)
class LayoutConfig:
    """Arena geometry, motion bounds and object placement rules."""

    arena_half_size: float = 3.0
    dt: float = 0.02
    # Braking authority must dominate the worst boundary drift of the
    # safety index: k * a_max >= 2 * v_max * sqrt(k * v_max + sigma +
    # d_min^n), or the admissible action set empties for fast far
    # approaches. The defaults here and in SafetyIndexParams satisfy it
    # with a wide margin; `validate_index` checks any other combination.
    a_max: float = 2.5          # m/s^2 realized by accel_cmd = +/-1
    omega_max: float = 2.0      # rad/s realized by turn_cmd = +/-1
    v_max: float = 1.0          # speed clamp, m/s
    hazard_count: int = 1
    hazard_radius: float = 0.7
    pillar_count: int = 0
    pillar_radius: float = 0.2
    goal_radius: float = 0.3
    lidar_range: float = 3.0
    lidar_bins: int = 16
    # Minimum surface clearance from the robot start; must cover the
    # zero-level distance of the safety index so episodes begin safe.
    start_clearance: float = 0.85
    object_keepout: float = 0.85
    goal_keepout: float = 1.0
    goal_min_spawn_distance: float = 0.5
    # Obstacle surfaces stay this far from the walls so a robot skimming
    # an obstacle always has stopping room before any wall (the wall
    # zeroes speed, which is only safe outside the protected band).
    obstacle_wall_margin: float = 0.9
    max_placement_tries: int = 10000

    def __post_init__(self):
        if self.arena_half_size <= 0 or self.dt <= 0:
            raise ContractViolationError("arena_half_size and dt must be positive")
        if self.hazard_count < 0 or self.pillar_count < 0:
            raise ContractViolationError("obstacle counts must be non-negative")
        if self.lidar_bins < 1:
            raise ContractViolationError("lidar_bins must be >= 1")


@dataclass(frozen=True)
class Action:
    """Scaled control command; both components are clamped to [-1, 1]."""

    accel_cmd: float
    turn_cmd: float

    def __post_init__(self):
        for v in (self.accel_cmd, self.turn_cmd):
            if not math.isfinite(v):
                raise ContractViolationError("non-finite action component")
        object.__setattr__(self, "accel_cmd", min(1.0, max(-1.0, self.accel_cmd)))
        object.__setattr__(self, "turn_cmd", min(1.0, max(-1.0, self.turn_cmd)))

    def as_array(self) -> np.ndarray:
        return np.array([self.accel_cmd, self.turn_cmd], dtype=np.float64)


@dataclass(frozen=True)
class EnvState:
    """Full simulator state; treat as immutable (arrays are never mutated)."""

    position: np.ndarray        # (2,)
    heading: float              # radians in [-pi, pi)
    speed: float                # signed, m/s
    goal_position: np.ndarray   # (2,)
    obstacles: tuple[Obstacle, ...]
    step_index: int
    prev_goal_distance: float
    layout: LayoutConfig


@dataclass(frozen=True)
class StateBatch:
    """Successor states for a batch of candidate actions from one state.

    Shared fields (goal, obstacles, layout) are inherited from the source
    state; only the kinematic fields vary per row.
    """

    positions: np.ndarray   # (N, 2)
    headings: np.ndarray    # (N,)
    speeds: np.ndarray      # (N,)
    source: EnvState

    def __len__(self) -> int:
        return self.positions.shape[0]

    def state_at(self, i: int) -> EnvState:
        """Materialize row i as a full EnvState (bookkeeping fields kept)."""
        return replace(
            self.source,
            position=self.positions[i].copy(),
            heading=float(self.headings[i]),
            speed=float(self.speeds[i]),
        )


@dataclass(frozen=True)
class Observation:
    goal_compass: np.ndarray   # (2,) unit direction to goal in ego frame
    goal_distance: float
    velocity_ego: np.ndarray   # (2,) velocity in ego frame
    hazard_lidar: np.ndarray   # (bins,) in [0, 1]
    pillar_lidar: np.ndarray   # (bins,) in [0, 1]

    def as_vector(self) -> np.ndarray:
        """Flat network input; goal distance is scaled by the lidar range
        so every component is O(1)."""
        return np.concatenate([
            self.goal_compass,
            [self.goal_distance / 3.0],
            self.velocity_ego,
            self.hazard_lidar,
            self.pillar_lidar,
        ])


def observation_dim(layout: LayoutConfig) -> int:
    return 5 + 2 * layout.lidar_bins


def obstacle_arrays(obstacles: tuple[Obstacle, ...]):
    """(centers (m,2), radii (m,), pillar mask (m,)); m may be zero."""
    m = len(obstacles)
    centers = np.empty((m, 2), dtype=np.float64)
    radii = np.empty(m, dtype=np.float64)
    pillar = np.zeros(m, dtype=bool)
    for i, ob in enumerate(obstacles):
        centers[i] = ob.center
        radii[i] = ob.radius
        pillar[i] = ob.kind == PILLAR
    return centers, radii, pillar


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def _propagate(state: EnvState, accels: np.ndarray, turns: np.ndarray):
    """Vectorized one-step transition for N action rows from one state.

    Semi-implicit Euler: the heading and speed update first and the new
    values advance the position. Arena walls clamp the position and zero
    the speed; pillar overlap is resolved by projecting the position to
    the pillar surface and zeroing the speed.

    Returns (StateBatch, contacts) where contacts (N,) counts the pillars
    penetrated by the unresolved kinematic position.
    """
    lay = state.layout
    dt = lay.dt

    heading = wrap_angle(state.heading + turns * lay.omega_max * dt)
    speed = np.clip(state.speed + accels * lay.a_max * dt, -lay.v_max, lay.v_max)
    pos = state.position + speed[:, None] * np.stack(
        [np.cos(heading), np.sin(heading)], axis=1) * dt

    limit = lay.arena_half_size
    clipped = np.clip(pos, -limit, limit)
    hit_wall = np.any(clipped != pos, axis=1)
    pos = clipped
    speed = np.where(hit_wall, 0.0, speed)

    contacts = np.zeros(len(accels), dtype=np.int64)
    centers, radii, pillar_mask = obstacle_arrays(state.obstacles)
    for j in np.flatnonzero(pillar_mask):
        rel = pos - centers[j]
        dist = np.hypot(rel[:, 0], rel[:, 1])
        inside = dist < radii[j]
        if not np.any(inside):
            continue
        contacts += inside
        # Degenerate hit at the exact center: push out along the heading.
        safe = np.where(dist > 0.0, dist, 1.0)
        unit = np.where(
            (dist > 0.0)[:, None],
            rel / safe[:, None],
            np.stack([np.cos(heading), np.sin(heading)], axis=1),
        )
        pos = np.where(inside[:, None], centers[j] + radii[j] * unit, pos)
        speed = np.where(inside, 0.0, speed)

    batch = StateBatch(positions=pos, headings=heading, speeds=speed, source=state)
    return batch, contacts


def lookahead(state: EnvState, actions: np.ndarray) -> StateBatch:
    """Black-box one-step transition for a batch of actions (N, 2).

    Action rows are (accel_cmd, turn_cmd), clamped to [-1, 1] on entry.
    This is the query surface handed to the safety filter.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] != 2:
        raise ContractViolationError("actions must have shape (N, 2)")
    if not np.isfinite(actions).all():
        raise ContractViolationError("non-finite action in batch")
    if not (np.isfinite(state.position).all() and math.isfinite(state.heading)
            and math.isfinite(state.speed)):
        raise ContractViolationError("non-finite state fields")
    actions = np.clip(actions, -1.0, 1.0)
    batch, _ = _propagate(state, actions[:, 0], actions[:, 1])
    return batch


def dynamics(state: EnvState, action: Action) -> EnvState:
    """Deterministic one-step transition (pure; input state untouched)."""
    batch = lookahead(state, action.as_array()[None, :])
    return batch.state_at(0)


# ---------------------------------------------------------------------------
# relative kinematics
# ---------------------------------------------------------------------------

def batch_relative_kinematics(batch: StateBatch):
    """Surface distance d (N, m) and closing rate d_dot (N, m).

    d is measured robot-center to obstacle-surface; d_dot is the radial
    component of the velocity (positive = receding). A robot exactly at
    an obstacle center gets the worst case d_dot = -|speed|.
    """
    centers, radii, _ = obstacle_arrays(batch.source.obstacles)
    rel = batch.positions[:, None, :] - centers[None, :, :]      # (N, m, 2)
    dist = np.hypot(rel[..., 0], rel[..., 1])                    # (N, m)
    d = dist - radii[None, :]
    vel = batch.speeds[:, None] * np.stack(
        [np.cos(batch.headings), np.sin(batch.headings)], axis=1)  # (N, 2)
    radial = np.where(dist > 0.0, dist, 1.0)
    ddot = (rel[..., 0] * vel[:, None, 0] + rel[..., 1] * vel[:, None, 1]) / radial
    ddot = np.where(dist > 0.0, ddot, -np.abs(batch.speeds)[:, None])
    return d, ddot


def _singleton_batch(state: EnvState) -> StateBatch:
    return StateBatch(
        positions=state.position[None, :].astype(np.float64),
        headings=np.array([state.heading], dtype=np.float64),
        speeds=np.array([state.speed], dtype=np.float64),
        source=state,
    )


def relative_kinematics(state: EnvState, obstacle: Obstacle):
    """(d, d_dot) of the robot relative to one obstacle."""
    probe = replace(state, obstacles=(obstacle,))
    d, ddot = batch_relative_kinematics(_singleton_batch(probe))
    return float(d[0, 0]), float(ddot[0, 0])


def state_batch_of(state: EnvState) -> StateBatch:
    """View a single state as a batch of one (shared vectorized paths)."""
    return _singleton_batch(state)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------

def observe(state: EnvState) -> Observation:
    """Ego-centric observation with angular max-pooled proximity lidars.

    Bin i covers the ego-frame angle sector [2*pi*i/B, 2*pi*(i+1)/B); an
    obstacle contributes clamp(1 - d_surface / lidar_range, 0, 1) to the
    bin containing its center direction, and bins take the max over the
    obstacles of their kind.
    """
    lay = state.layout
    to_goal = state.goal_position - state.position
    goal_distance = float(np.hypot(to_goal[0], to_goal[1]))
    cos_h = math.cos(state.heading)
    sin_h = math.sin(state.heading)
    if goal_distance > 0.0:
        ego_goal = np.array([
            (to_goal[0] * cos_h + to_goal[1] * sin_h) / goal_distance,
            (-to_goal[0] * sin_h + to_goal[1] * cos_h) / goal_distance,
        ])
    else:
        ego_goal = np.zeros(2)

    bins = lay.lidar_bins
    hazard_lidar = np.zeros(bins)
    pillar_lidar = np.zeros(bins)
    if state.obstacles:
        centers, radii, pillar_mask = obstacle_arrays(state.obstacles)
        rel = centers - state.position
        dist = np.hypot(rel[:, 0], rel[:, 1])
        surface = dist - radii
        ego_angle = wrap_angle(np.arctan2(rel[:, 1], rel[:, 0]) - state.heading)
        sector = np.minimum(
            ((ego_angle + math.pi) / TWO_PI * bins).astype(int), bins - 1)
        strength = np.clip(1.0 - surface / lay.lidar_range, 0.0, 1.0)
        for i in range(len(state.obstacles)):
            target = pillar_lidar if pillar_mask[i] else hazard_lidar
            b = sector[i]
            if strength[i] > target[b]:
                target[b] = strength[i]

    return Observation(
        goal_compass=ego_goal,
        goal_distance=goal_distance,
        velocity_ego=np.array([state.speed, 0.0]),
        hazard_lidar=hazard_lidar,
        pillar_lidar=pillar_lidar,
    )


# ---------------------------------------------------------------------------
# reset / step
# ---------------------------------------------------------------------------

def _sample_point(rng: np.random.Generator, limit: float) -> np.ndarray:
    return rng.uniform(-limit, limit, size=2)


def _sample_goal(rng: np.random.Generator, layout: LayoutConfig,
                 obstacles: tuple[Obstacle, ...],
                 robot_position: np.ndarray) -> np.ndarray:
    centers, radii, _ = obstacle_arrays(obstacles)
    limit = layout.arena_half_size - layout.goal_radius
    for _ in range(layout.max_placement_tries):
        cand = _sample_point(rng, limit)
        if len(obstacles):
            gaps = np.hypot(*(centers - cand).T) - radii
            if np.min(gaps) < layout.goal_radius + layout.goal_keepout:
                continue
        if np.hypot(*(cand - robot_position)) < layout.goal_min_spawn_distance:
            continue
        return cand
    raise PlacementError("could not place goal; arena too crowded")


def reset(seed: int, layout: LayoutConfig):
    """Build a fresh episode start: robot at the arena center with zero
    speed and a seeded random heading, obstacles and goal placed by
    seeded rejection sampling with pairwise clearance, so the episode
    starts strictly inside the safe region.
    """
    rng = np.random.default_rng(seed)
    heading = float(rng.uniform(-math.pi, math.pi))
    start = np.zeros(2)

    specs = [(HAZARD, layout.hazard_radius)] * layout.hazard_count
    specs += [(PILLAR, layout.pillar_radius)] * layout.pillar_count
    placed: list[Obstacle] = []
    for kind, radius in specs:
        limit = layout.arena_half_size - radius - layout.obstacle_wall_margin
        if limit <= 0:
            raise PlacementError(f"{kind} radius {radius} does not fit the arena")
        for attempt in range(layout.max_placement_tries):
            cand = _sample_point(rng, limit)
            if np.hypot(*cand) < radius + layout.start_clearance:
                continue
            ok = True
            for prev in placed:
                sep = np.hypot(*(cand - np.asarray(prev.center)))
                if sep < radius + prev.radius + layout.object_keepout:
                    ok = False
                    break
            if ok:
                placed.append(Obstacle(kind, (float(cand[0]), float(cand[1])), radius))
                break
        else:
            raise PlacementError(
                f"could not place {kind} after {layout.max_placement_tries} tries")

    obstacles = tuple(placed)
    goal = _sample_goal(rng, layout, obstacles, start)
    state = EnvState(
        position=start,
        heading=heading,
        speed=0.0,
        goal_position=goal,
        obstacles=obstacles,
        step_index=0,
        prev_goal_distance=float(np.hypot(*goal)),
        layout=layout,
    )
    return state, observe(state)


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    observation: Observation
    reward: float
    cost: float
    goal_met: bool


def step(state: EnvState, action: Action,
         rng: Optional[np.random.Generator] = None) -> StepResult:
    """Advance one control step: kinematics, goal reward, obstacle costs,
    and (on success) seeded goal respawn with distance re-basing.
    """
    lay = state.layout
    if not (math.isfinite(action.accel_cmd) and math.isfinite(action.turn_cmd)):
        raise ContractViolationError("non-finite action")
    batch, contacts = _propagate(
        state, np.array([action.accel_cmd]), np.array([action.turn_cmd]))
    moved = batch.state_at(0)

    cost = float(contacts[0])
    hazard_penetration = -math.inf
    for ob in state.obstacles:
        if ob.kind == HAZARD:
            center_dist = float(np.hypot(*(moved.position - np.asarray(ob.center))))
            hazard_penetration = max(hazard_penetration, ob.radius - center_dist)
    if math.isfinite(hazard_penetration):
        cost += max(0.0, hazard_penetration)

    goal_distance = float(np.hypot(*(moved.position - moved.goal_position)))
    goal_met = goal_distance < lay.goal_radius
    reward = state.prev_goal_distance - goal_distance + (1.0 if goal_met else 0.0)

    if goal_met:
        if rng is None:
            raise ContractViolationError("goal respawn requires an rng stream")
        new_goal = _sample_goal(rng, lay, state.obstacles, moved.position)
        next_state = replace(
            moved,
            goal_position=new_goal,
            step_index=state.step_index + 1,
            prev_goal_distance=float(np.hypot(*(moved.position - new_goal))),
        )
    else:
        next_state = replace(
            moved,
            step_index=state.step_index + 1,
            prev_goal_distance=goal_distance,
        )
    return StepResult(next_state, observe(next_state), reward, cost, goal_met)
