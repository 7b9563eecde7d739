"""Deterministic kinematic two-lane simulator for cooperative lane changes.

Vehicles follow unicycle kinematics with one time unit per step.  A
scripted vehicle drives at a crawl in lane 0 to create congestion; learning
vehicles are driven by their option skills.  The state is immutable from
the caller's point of view: :func:`step` and :func:`begin_lane_change`
return fresh :class:`EnvState` objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from hero.errors import ConfigError, InvalidActionError
from hero.kernels import collision_matrix, lidar_scan_kernel
from hero.options import OptionId

# lane-change status codes
LC_NONE, LC_ACTIVE, LC_DONE, LC_FAILED = 0, 1, 2, 3


@dataclass(frozen=True)
class VehicleSpec:
    """Placement rule for one vehicle.  ``lane=None`` draws the lane at reset."""

    lane: int | None
    x_range: tuple[float, float]
    scripted: bool = False


@dataclass(frozen=True)
class EnvConfig:
    vehicles: tuple[VehicleSpec, ...]
    lane_count: int = 2
    lane_width: float = 0.5
    track_length: float = 20.0
    l_safe: float = 0.3
    vehicle_radius: float = 0.1
    n_rays: int = 36
    ray_max: float = 5.0
    dt: float = 1.0
    max_speed: float = 0.2
    max_angular: float = 0.3
    heading_limit: float = math.pi / 3
    initial_speed: float = 0.08
    scripted_speed: float = 0.02
    alpha: float = 0.7
    beta: float = 0.5
    episode_length: int = 30
    collision_penalty: float = -20.0
    lane_change_reward: float = 20.0
    lane_change_tolerance: float = 0.1
    lane_change_max_steps: int = 10
    option_duration: int = 5
    placement_tries: int = 100
    off_track_ends_episode: bool = True

    def __post_init__(self):
        if not 1 <= len(self.vehicles) <= 8:
            raise ConfigError("between 1 and 8 vehicles supported")
        if self.lane_count < 1:
            raise ConfigError("lane_count must be >= 1")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        for v in self.vehicles:
            if v.lane is not None and not 0 <= v.lane < self.lane_count:
                raise ConfigError(f"vehicle lane {v.lane} outside 0..{self.lane_count - 1}")
            if v.x_range[0] > v.x_range[1]:
                raise ConfigError(f"empty x_range {v.x_range}")

    @property
    def geometry(self) -> "LaneGeometry":
        return LaneGeometry(self.lane_count, self.lane_width, self.track_length)

    @property
    def max_travel(self) -> float:
        return self.max_speed * self.dt

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def learner_ids(self) -> list[int]:
        return [i for i, v in enumerate(self.vehicles) if not v.scripted]

    @property
    def scripted_ids(self) -> list[int]:
        return [i for i, v in enumerate(self.vehicles) if v.scripted]

    @property
    def high_obs_dim(self) -> int:
        return self.n_rays + 2


@dataclass(frozen=True)
class LaneGeometry:
    lane_count: int
    lane_width: float = 0.5
    track_length: float = 20.0

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    def nearest_lane(self, y: float) -> int:
        # ties resolve to the lower index
        best, best_d = 0, math.inf
        for l in range(self.lane_count):
            d = abs(y - self.lane_center(l))
            if d < best_d:
                best, best_d = l, d
        return best

    @property
    def lateral_bounds(self) -> tuple[float, float]:
        return 0.0, self.lane_count * self.lane_width

    def on_track(self, y: float) -> bool:
        lo, hi = self.lateral_bounds
        return lo <= y <= hi


@dataclass(frozen=True)
class VehicleState:
    id: int
    x: float
    y: float
    heading: float
    linear_speed: float
    angular_speed: float
    lane_id: int
    scripted: bool


@dataclass
class EnvState:
    config: EnvConfig
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    omega: np.ndarray
    scripted: np.ndarray
    lc_target: np.ndarray
    lc_status: np.ndarray
    lc_steps: np.ndarray
    lc_direction: np.ndarray
    step: int = 0
    crashed: bool = False
    rng_state: dict | None = None

    @property
    def geometry(self) -> LaneGeometry:
        return self.config.geometry

    @property
    def done(self) -> bool:
        return self.crashed or self.step >= self.config.episode_length

    def lane_id(self, vid: int) -> int:
        return self.geometry.nearest_lane(float(self.y[vid]))

    @property
    def vehicles(self) -> list[VehicleState]:
        return [
            VehicleState(i, float(self.x[i]), float(self.y[i]), float(self.heading[i]),
                         float(self.speed[i]), float(self.omega[i]), self.lane_id(i),
                         bool(self.scripted[i]))
            for i in range(self.x.shape[0])
        ]

    def copy(self) -> "EnvState":
        return replace(
            self,
            x=self.x.copy(), y=self.y.copy(), heading=self.heading.copy(),
            speed=self.speed.copy(), omega=self.omega.copy(), scripted=self.scripted.copy(),
            lc_target=self.lc_target.copy(), lc_status=self.lc_status.copy(),
            lc_steps=self.lc_steps.copy(), lc_direction=self.lc_direction.copy(),
        )


@dataclass(frozen=True)
class StepEvents:
    collisions: frozenset[tuple[int, int]]
    lane_change_completed: frozenset[int]
    lane_change_failed: frozenset[int]
    off_track: frozenset[int]
    travel: Mapping[int, float]
    done: bool = False

    @property
    def crashed_ids(self) -> frozenset[int]:
        ids = set(self.off_track)
        for i, j in self.collisions:
            ids.update((i, j))
        return frozenset(ids)

    @property
    def crashed(self) -> bool:
        return bool(self.collisions or self.off_track)


@dataclass(frozen=True)
class HighObservation:
    lidar: np.ndarray
    speed: float
    lane_id: int
    maneuvering: bool = False
    lane_count: int = 2
    vector: np.ndarray = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class LowObservation:
    rays: np.ndarray
    lateral_deviation: float
    heading_error: float
    speed: float
    lane_id: int
    target_lane_id: int = -1
    target_offset: float = 0.0
    direction: int = 0
    lane_width: float = 0.5
    angular_speed: float = 0.0


# ---------------------------------------------------------------------------
# scenarios


def congestion_config(n_vehicles: int = 4, **overrides) -> EnvConfig:
    """Two-lane congestion scene; the last vehicle is the scripted crawler.

    With four vehicles, id 1 sits behind the crawler in lane 0 and has to
    merge into lane 1 between ids 0 and 2.
    """
    layouts = {
        2: (VehicleSpec(0, (0.0, 1.0)),),
        3: (VehicleSpec(1, (0.0, 2.0)), VehicleSpec(0, (0.0, 1.0))),
        4: (VehicleSpec(1, (0.0, 2.0)), VehicleSpec(0, (0.0, 1.0)), VehicleSpec(1, (0.0, 3.0))),
    }
    if n_vehicles not in layouts:
        raise ConfigError("congestion scenario supports 2-4 vehicles")
    crawler = VehicleSpec(0, (2.0, 2.0), scripted=True)
    return EnvConfig(vehicles=layouts[n_vehicles] + (crawler,), **overrides)


def single_vehicle_config(**overrides) -> EnvConfig:
    """Stage-1 skill environment: one learner in a random lane."""
    return EnvConfig(vehicles=(VehicleSpec(None, (0.0, 1.0)),), **overrides)


# ---------------------------------------------------------------------------
# core dynamics


def reset(config: EnvConfig, seed) -> tuple[EnvState, dict[int, HighObservation], dict[int, LowObservation]]:
    rng = np.random.default_rng(seed)
    geo = config.geometry
    n = config.n_vehicles
    min_gap = 2.0 * config.l_safe
    for _ in range(config.placement_tries):
        lanes = np.array([
            v.lane if v.lane is not None else int(rng.integers(config.lane_count))
            for v in config.vehicles
        ])
        xs = np.array([
            v.x_range[0] if v.x_range[0] == v.x_range[1] else rng.uniform(*v.x_range)
            for v in config.vehicles
        ])
        ok = True
        for i in range(n):
            for j in range(i + 1, n):
                if lanes[i] == lanes[j] and abs(xs[i] - xs[j]) < min_gap:
                    ok = False
        if ok:
            break
    else:
        raise ConfigError(f"could not place vehicles after {config.placement_tries} tries")
    scripted = np.array([v.scripted for v in config.vehicles], dtype=bool)
    state = EnvState(
        config=config,
        x=xs.astype(float),
        y=np.array([geo.lane_center(int(l)) for l in lanes], dtype=float),
        heading=np.zeros(n),
        speed=np.where(scripted, config.scripted_speed, config.initial_speed).astype(float),
        omega=np.zeros(n),
        scripted=scripted,
        lc_target=np.full(n, -1, dtype=int),
        lc_status=np.zeros(n, dtype=int),
        lc_steps=np.zeros(n, dtype=int),
        lc_direction=np.zeros(n, dtype=int),
        rng_state=rng.bit_generator.state,
    )
    return state, all_high_observations(state), all_low_observations(state)


def begin_lane_change(state: EnvState, vid: int) -> EnvState:
    """Mark ``vid`` as maneuvering toward the adjacent lane."""
    cfg = state.config
    if cfg.lane_count < 2:
        raise InvalidActionError("no adjacent lane on a single-lane track")
    if state.lc_status[vid] == LC_ACTIVE:
        raise InvalidActionError(f"vehicle {vid} is already changing lanes")
    lane = state.lane_id(vid)
    target = lane + 1 if lane + 1 < cfg.lane_count else lane - 1
    new = state.copy()
    new.lc_target[vid] = target
    new.lc_status[vid] = LC_ACTIVE
    new.lc_steps[vid] = 0
    new.lc_direction[vid] = 1 if target > lane else -1
    return new


def collision_check(state: EnvState) -> set[tuple[int, int]]:
    cfg = state.config
    hit = collision_matrix(state.x, state.y, 0.5 * cfg.lane_width, cfg.l_safe)
    ii, jj = np.nonzero(np.triu(hit, 1))
    return {(int(i), int(j)) for i, j in zip(ii, jj)}


def lidar_scan(state: EnvState, vid: int) -> np.ndarray:
    cfg = state.config
    if not 0 <= vid < state.x.shape[0]:
        raise InvalidActionError(f"unknown vehicle id {vid}")
    return lidar_scan_kernel(state.x, state.y, int(vid), float(state.heading[vid]),
                             cfg.n_rays, cfg.vehicle_radius, cfg.ray_max)


def _validate_actions(state: EnvState, actions: Mapping[int, Sequence[float]]):
    cfg = state.config
    n = state.x.shape[0]
    tol = 1e-9
    for vid, cmd in actions.items():
        if not isinstance(vid, (int, np.integer)) or not 0 <= vid < n:
            raise InvalidActionError(f"unknown vehicle id {vid!r}")
        v, w = float(cmd[0]), float(cmd[1])
        if not (math.isfinite(v) and math.isfinite(w)):
            raise InvalidActionError(f"non-finite command for vehicle {vid}: {cmd}")
        if not (-tol <= v <= cfg.max_speed + tol and abs(w) <= cfg.max_angular + tol):
            raise InvalidActionError(f"command {cmd} for vehicle {vid} outside global bounds")


def step(state: EnvState, actions: Mapping[int, Sequence[float]]) -> tuple[EnvState, StepEvents]:
    """Advance one time unit.  Learners missing from ``actions`` hold their last command."""
    if state.done:
        raise InvalidActionError("episode already finished; call reset")
    _validate_actions(state, actions)
    cfg = state.config
    geo = cfg.geometry
    new = state.copy()
    for vid, cmd in actions.items():
        if new.scripted[vid]:
            continue
        new.speed[vid] = float(cmd[0])
        new.omega[vid] = float(cmd[1])
    dt = cfg.dt
    x0 = state.x
    new.x = x0 + new.speed * np.cos(state.heading) * dt
    new.y = state.y + new.speed * np.sin(state.heading) * dt
    new.heading = np.clip(state.heading + new.omega * dt, -cfg.heading_limit, cfg.heading_limit)
    new.step = state.step + 1

    collisions = collision_check(new)
    in_collision = {i for pair in collisions for i in pair}
    lo, hi = geo.lateral_bounds
    off_track = {i for i in range(new.x.shape[0]) if not lo <= new.y[i] <= hi}
    travel = {i: float(new.x[i] - x0[i]) for i in range(new.x.shape[0])}

    completed, failed = set(), set()
    for vid in np.nonzero(new.lc_status == LC_ACTIVE)[0]:
        vid = int(vid)
        new.lc_steps[vid] += 1
        err = abs(new.y[vid] - geo.lane_center(int(new.lc_target[vid])))
        if vid in in_collision or vid in off_track:
            new.lc_status[vid] = LC_FAILED
            failed.add(vid)
        elif err < cfg.lane_change_tolerance * cfg.lane_width:
            new.lc_status[vid] = LC_DONE
            completed.add(vid)
        elif new.lc_steps[vid] >= cfg.lane_change_max_steps:
            new.lc_status[vid] = LC_FAILED
            failed.add(vid)

    new.crashed = bool(collisions or (off_track and cfg.off_track_ends_episode))
    events = StepEvents(
        collisions=frozenset(collisions),
        lane_change_completed=frozenset(completed),
        lane_change_failed=frozenset(failed),
        off_track=frozenset(off_track),
        travel=travel,
        done=new.done,
    )
    return new, events


# ---------------------------------------------------------------------------
# observations


def high_observation(state: EnvState, vid: int) -> HighObservation:
    cfg = state.config
    lidar = lidar_scan(state, vid)
    speed = float(state.speed[vid])
    lane = state.lane_id(vid)
    vector = np.empty(cfg.n_rays + 2)
    vector[:cfg.n_rays] = lidar / cfg.ray_max
    vector[cfg.n_rays] = speed / cfg.max_speed
    vector[cfg.n_rays + 1] = lane
    return HighObservation(
        lidar=lidar, speed=speed, lane_id=lane,
        maneuvering=bool(state.lc_status[vid] == LC_ACTIVE),
        lane_count=cfg.lane_count, vector=vector,
    )


def low_observation(state: EnvState, vid: int) -> LowObservation:
    cfg = state.config
    geo = cfg.geometry
    y = float(state.y[vid])
    lane = geo.nearest_lane(y)
    target = int(state.lc_target[vid])
    offset = y - geo.lane_center(target) if target >= 0 else 0.0
    return LowObservation(
        rays=lidar_scan(state, vid),
        lateral_deviation=y - geo.lane_center(lane),
        heading_error=float(state.heading[vid]),
        speed=float(state.speed[vid]),
        lane_id=lane,
        target_lane_id=target,
        target_offset=offset,
        direction=int(state.lc_direction[vid]),
        lane_width=cfg.lane_width,
        angular_speed=float(state.omega[vid]),
    )


def all_high_observations(state: EnvState) -> dict[int, HighObservation]:
    return {i: high_observation(state, i) for i in state.config.learner_ids}


def all_low_observations(state: EnvState) -> dict[int, LowObservation]:
    return {i: low_observation(state, i) for i in state.config.learner_ids}


# ---------------------------------------------------------------------------
# rewards


def travel_reward(travel: float, max_travel: float = 0.2) -> float:
    return min(max(travel / max_travel, 0.0), 1.0)


def high_reward(events: StepEvents, vid: int, alpha: float, collision_penalty: float = -20.0,
                max_travel: float = 0.2) -> float:
    """Team reward ``alpha * r_col + (1 - alpha) * r_travel`` for one vehicle."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    r_col = collision_penalty if vid in events.crashed_ids else 0.0
    r_travel = travel_reward(events.travel.get(vid, 0.0), max_travel)
    return alpha * r_col + (1.0 - alpha) * r_travel


def intrinsic_reward(option: OptionId, obs: LowObservation, events: StepEvents, vid: int,
                     beta: float, max_travel: float = 0.2, lane_change_reward: float = 20.0) -> float:
    """Skill reward computed from the post-step observation and events."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    r_travel = travel_reward(events.travel.get(vid, 0.0), max_travel)
    if OptionId(option) == OptionId.LANE_CHANGE:
        if vid in events.lane_change_completed:
            return lane_change_reward
        if vid in events.lane_change_failed:
            return -lane_change_reward
        return r_travel
    r_dev = -min(abs(obs.lateral_deviation) / (0.5 * obs.lane_width), 1.0)
    return beta * r_dev + (1.0 - beta) * r_travel
