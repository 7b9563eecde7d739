"""Run configuration: training hyperparameters, scenario and seeds.

Config files are JSON objects keyed by the names in :data:`HYPER_KEYS`
plus ``n_vehicles``, ``seeds`` and an optional ``env`` object of
:class:`~hero.env.EnvConfig` overrides.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from hero import env as E
from hero.errors import ConfigError
from hero.high_agent import DISCOUNT_MODES

STAGES = ("skills", "cooperate", "evaluate", "baseline")


@dataclass(frozen=True)
class Hyper:
    training_episodes: int = 14_000
    episode_length: int = 30
    buffer_capacity: int = 100_000
    batch_size: int = 1024
    learning_rate: float = 0.01
    discount_factor: float = 0.95
    hidden_dim: int = 32
    target_update_rate: float = 0.01
    skill_episodes: int = 14_000
    skill_entropy_weight: float = 0.2
    opponent_entropy_weight: float = 0.01
    discount_mode: str = "option"
    eval_episodes: int = 20

    def __post_init__(self):
        for name in ("training_episodes", "skill_episodes", "eval_episodes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("episode_length", "buffer_capacity", "batch_size", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.discount_factor < 1.0:
            raise ConfigError("discount_factor must lie in [0, 1)")
        if not 0.0 < self.target_update_rate <= 1.0:
            raise ConfigError("target_update_rate must lie in (0, 1]")
        if self.skill_entropy_weight < 0 or self.opponent_entropy_weight < 0:
            raise ConfigError("entropy weights must be >= 0")
        if self.discount_mode not in DISCOUNT_MODES:
            raise ConfigError(f"discount_mode must be one of {DISCOUNT_MODES}")


HYPER_KEYS = tuple(f.name for f in dataclasses.fields(Hyper))

FAST_PROFILE = {"training_episodes": 2000, "skill_episodes": 2000, "n_vehicles": 2}


@dataclass(frozen=True)
class RunConfig:
    stage: str = "cooperate"
    hyper: Hyper = field(default_factory=Hyper)
    n_vehicles: int = 4
    env_overrides: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if not 2 <= self.n_vehicles <= 4:
            raise ConfigError("n_vehicles must be 2, 3 or 4")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.env_config()  # validates overrides

    def env_config(self) -> E.EnvConfig:
        try:
            return E.congestion_config(self.n_vehicles, episode_length=self.hyper.episode_length,
                                       **self.env_overrides)
        except TypeError as exc:
            raise ConfigError(f"bad env override: {exc}") from exc

    def skill_env_config(self) -> E.EnvConfig:
        keep = {k: v for k, v in self.env_overrides.items() if k != "vehicles"}
        keep.setdefault("off_track_ends_episode", False)
        return E.single_vehicle_config(episode_length=self.hyper.episode_length, **keep)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self.hyper)
        out.update(stage=self.stage, n_vehicles=self.n_vehicles, env=dict(self.env_overrides),
                   seeds=list(self.seeds), out_dir=self.out_dir)
        return out

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory excluded)."""
        body = self.to_dict()
        body.pop("out_dir")
        body.pop("stage")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def from_dict(body: dict, **defaults) -> RunConfig:
    body = dict(body)
    unknown = set(body) - set(HYPER_KEYS) - {"stage", "n_vehicles", "env", "seeds", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    try:
        hyper = Hyper(**{k: body[k] for k in HYPER_KEYS if k in body})
        kwargs = dict(defaults)
        if "stage" in body:
            kwargs["stage"] = body["stage"]
        if "n_vehicles" in body:
            kwargs["n_vehicles"] = int(body["n_vehicles"])
        if "env" in body:
            kwargs["env_overrides"] = dict(body["env"])
        if "seeds" in body:
            kwargs["seeds"] = tuple(int(s) for s in body["seeds"])
        if "out_dir" in body:
            kwargs["out_dir"] = str(body["out_dir"])
        return RunConfig(hyper=hyper, **kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> dict:
    path = Path(path)
    try:
        body = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(body, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return body


def build(stage: str, path=None, seed: int | None = None, out_dir: str | None = None,
          fast: bool = False) -> RunConfig:
    """Layer defaults, the fast profile, a config file and CLI flags, in that order."""
    body: dict = {"stage": stage}
    if fast:
        body.update(FAST_PROFILE)
    if path is not None:
        body.update(load_config(path))
        body["stage"] = stage
    if seed is not None:
        body["seeds"] = [seed]
    if out_dir is not None:
        body["out_dir"] = out_dir
    return from_dict(body)
