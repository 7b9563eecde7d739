"""The four driving options: ids, action bounds, initiation and termination.

An option is the triple (initiation set, internal skill policy, termination
condition).  Skills live in :mod:`hero.low_agent`; this module owns the
other two members plus the per-agent execution record that accumulates the
high-level reward while an option runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import TYPE_CHECKING, Callable

if TYPE_CHECKING:
    from hero.env import EnvConfig, HighObservation, LowObservation


class OptionId(IntEnum):
    KEEP_LANE = 0
    SLOW_DOWN = 1
    ACCELERATE = 2
    LANE_CHANGE = 3


N_OPTIONS = len(OptionId)
LEARNED_OPTIONS = (OptionId.SLOW_DOWN, OptionId.ACCELERATE, OptionId.LANE_CHANGE)

# KeepLane has no bounds of its own: the previous command is held.
HOLD_PREVIOUS = None

_BOUNDS = {
    OptionId.SLOW_DOWN: ((0.04, 0.08), (-0.1, 0.1)),
    OptionId.ACCELERATE: ((0.08, 0.14), (-0.1, 0.1)),
    # angular magnitude, signed toward the target lane at execution time
    OptionId.LANE_CHANGE: ((0.1, 0.2), (0.12, 0.25)),
}


def action_bounds(option: OptionId):
    """``((lin_lo, lin_hi), (ang_lo, ang_hi))``, or ``HOLD_PREVIOUS`` for KeepLane."""
    option = OptionId(option)
    if option == OptionId.KEEP_LANE:
        return HOLD_PREVIOUS
    return _BOUNDS[option]


@dataclass(frozen=True)
class OptionSpec:
    id: OptionId
    max_duration: int
    linear_bounds: tuple[float, float]
    angular_bounds: tuple[float, float]
    fixed_duration: int | None
    lane_width: float
    success_tolerance: float
    initiation: Callable[["HighObservation"], bool] = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        if self.max_duration < 1:
            raise ValueError("max_duration must be >= 1")
        for lo, hi in (self.linear_bounds, self.angular_bounds):
            if lo > hi:
                raise ValueError(f"bounds out of order: [{lo}, {hi}]")

    def termination(self, obs: "LowObservation", steps_elapsed: int) -> bool:
        return terminated(self, obs, steps_elapsed)


def _always(obs) -> bool:
    return True


def _lane_change_allowed(obs) -> bool:
    return obs.lane_count >= 2 and not obs.maneuvering


def option_specs(config: "EnvConfig") -> dict[OptionId, OptionSpec]:
    specs = {}
    for opt in OptionId:
        bounds = action_bounds(opt)
        if bounds is HOLD_PREVIOUS:
            bounds = ((0.0, config.max_speed), (-config.max_angular, config.max_angular))
        is_lc = opt == OptionId.LANE_CHANGE
        specs[opt] = OptionSpec(
            id=opt,
            max_duration=config.lane_change_max_steps,
            linear_bounds=bounds[0],
            angular_bounds=bounds[1],
            fixed_duration=None if is_lc else config.option_duration,
            lane_width=config.lane_width,
            success_tolerance=config.lane_change_tolerance,
            initiation=_lane_change_allowed if is_lc else _always,
        )
    return specs


def available_options(obs: "HighObservation") -> frozenset[OptionId]:
    opts = {OptionId.KEEP_LANE, OptionId.SLOW_DOWN, OptionId.ACCELERATE}
    if _lane_change_allowed(obs):
        opts.add(OptionId.LANE_CHANGE)
    return frozenset(opts)


def availability_mask(obs: "HighObservation"):
    import numpy as np

    avail = available_options(obs)
    return np.array([o in avail for o in OptionId], dtype=bool)


def terminated(spec: OptionSpec, obs: "LowObservation", steps_elapsed: int) -> bool:
    if steps_elapsed < 1:
        raise ValueError("steps_elapsed must be >= 1")
    if steps_elapsed >= spec.max_duration:
        return True
    if spec.id == OptionId.LANE_CHANGE:
        return abs(obs.target_offset) < spec.success_tolerance * spec.lane_width
    return steps_elapsed >= spec.fixed_duration


@dataclass
class OptionExecution:
    """Book-keeping for one running option of one agent."""

    option: OptionId
    start_step: int
    steps_elapsed: int = 0
    accumulated_high_reward: float = 0.0
    rewards: list[float] = field(default_factory=list)

    def record(self, r_h: float) -> None:
        self.steps_elapsed += 1
        self.rewards.append(float(r_h))
        self.accumulated_high_reward += float(r_h)
