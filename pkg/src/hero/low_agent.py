"""Low-level skills: one maximum-entropy actor-critic per learned option.

Actions are squashed into the option's box::

    a = lo + (hi - lo) * (tanh(g) + 1) / 2,   g ~ N(mu(s), sigma(s))

and the log-density carries the tanh and affine Jacobians.  The critic
sees the state features together with ``u = tanh(g)`` in [-1, 1]^2, which
keeps its input scale independent of the option's bounds.

KeepLane has no learned policy: it repeats the previous command.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hero import env as E
from hero import nn
from hero.errors import ConfigError, NonFiniteError
from hero.nn import AdamState, MlpNetwork, Tape, adam_step, soft_update
from hero.options import LEARNED_OPTIONS, OptionId, action_bounds
from hero.replay import ArrayBuffer

SPEED_SCALE = 0.2
FEATURE_DIM = 3
ACTION_DIM = 2
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


def skill_features(option: OptionId, obs: E.LowObservation) -> np.ndarray:
    """Geometry-only inputs for a skill network.

    Lane changes are expressed in a frame mirrored by the maneuver
    direction, so one policy serves both left and right changes.
    """
    if OptionId(option) == OptionId.LANE_CHANGE:
        d = obs.direction if obs.direction else 1
        return np.array([d * obs.target_offset / obs.lane_width, d * obs.heading_error,
                         obs.speed / SPEED_SCALE])
    return np.array([obs.lateral_deviation / (0.5 * obs.lane_width), obs.heading_error,
                     obs.speed / SPEED_SCALE])


@dataclass
class SkillHyper:
    hidden: int = 32
    lr: float = 0.01
    gamma: float = 0.95
    tau: float = 0.01
    batch_size: int = 1024
    alpha: float = 0.2
    buffer_capacity: int = 100_000


class SkillPolicy:
    def __init__(self, option: OptionId, hidden: int = 32, alpha: float = 0.2, rng=None):
        option = OptionId(option)
        if option not in LEARNED_OPTIONS:
            raise ConfigError(f"{option.name} has no learned skill")
        if alpha < 0:
            raise ValueError("entropy weight must be >= 0")
        rng = np.random.default_rng(rng)
        self.option = option
        self.alpha = float(alpha)
        (l_lo, l_hi), (a_lo, a_hi) = action_bounds(option)
        self.low = np.array([l_lo, a_lo])
        self.high = np.array([l_hi, a_hi])
        self.actor = MlpNetwork([FEATURE_DIM, hidden, hidden, 2 * ACTION_DIM], "gaussian", rng)
        self.critic = MlpNetwork([FEATURE_DIM + ACTION_DIM, hidden, hidden, 1], "linear", rng)
        self.target_critic = self.critic.copy()
        self.actor_opt = AdamState.for_params(self.actor.params)
        self.critic_opt = AdamState.for_params(self.critic.params)

    @property
    def half_range(self) -> np.ndarray:
        return 0.5 * (self.high - self.low)

    def to_action(self, u: np.ndarray) -> np.ndarray:
        return self.low + self.half_range * (u + 1.0)

    def to_unit(self, action: np.ndarray) -> np.ndarray:
        return (np.asarray(action) - self.low) / self.half_range - 1.0


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values: {arr}")


def _squash_np(policy: SkillPolicy, feats: np.ndarray, noise: np.ndarray):
    out = policy.actor.forward(feats)
    _check_finite("actor", out)
    mu, log_std = out[..., :ACTION_DIM], out[..., ACTION_DIM:]
    g = mu + np.exp(log_std) * noise
    u = np.tanh(g)
    logp = (-0.5 * noise**2 - log_std - _HALF_LOG_2PI).sum(-1)
    logp -= (2.0 * (_LOG2 - g - np.logaddexp(0.0, -2.0 * g))).sum(-1)
    logp -= np.log(policy.half_range).sum()
    return u, logp


def _squash_tape(policy: SkillPolicy, tape: Tape, feats: np.ndarray, noise: np.ndarray):
    out = policy.actor.forward_tape(tape, feats)
    mu = nn.columns(out, 0, ACTION_DIM)
    log_std = nn.columns(out, ACTION_DIM, 2 * ACTION_DIM)
    g = mu + nn.exp(log_std) * noise
    u = nn.tanh(g)
    # (g - mu) / sigma is the fixed noise, so only -log_std carries gradient here
    gauss = nn.sum_((-0.5 * noise**2 - _HALF_LOG_2PI) - log_std, axis=1)
    jac = nn.sum_(nn.scale(_LOG2 - g - nn.softplus(nn.scale(g, -2.0)), 2.0), axis=1)
    logp = gauss - jac - float(np.log(policy.half_range).sum())
    return u, logp


def sample_action(policy: SkillPolicy, obs: E.LowObservation, rng: np.random.Generator):
    """Stochastic action inside the option box and its log-density."""
    feats = skill_features(policy.option, obs)
    noise = rng.standard_normal(ACTION_DIM)
    u, logp = _squash_np(policy, feats, noise)
    return policy.to_action(u), float(logp)


def greedy_action(policy: SkillPolicy, obs: E.LowObservation) -> np.ndarray:
    out = policy.actor.forward(skill_features(policy.option, obs))
    _check_finite("actor", out)
    return policy.to_action(np.tanh(out[:ACTION_DIM]))


def critic_update(policy: SkillPolicy, batch, gamma: float, lr: float, rng: np.random.Generator) -> float:
    """One step on the squared TD error; the target uses a fresh next action."""
    feats, u = batch["features"], batch["u"]
    reward, next_feats, done = batch["reward"], batch["next_features"], batch["done"]
    noise = rng.standard_normal((feats.shape[0], ACTION_DIM))
    u_next, _ = _squash_np(policy, next_feats, noise)
    q_next = policy.target_critic.forward(np.concatenate([next_feats, u_next], axis=1))[:, 0]
    y = reward + gamma * (1.0 - done) * q_next

    tape = Tape()
    q = policy.critic.forward_tape(tape, np.concatenate([feats, u], axis=1))
    loss = nn.mean(nn.square(nn.columns(q, 0, 1) - y[:, None]))
    value = float(loss.value)
    if not math.isfinite(value):
        raise NonFiniteError(f"critic loss is {value}")
    tape.backward(loss)
    adam_step(policy.critic.params, tape.gradients(policy.critic), policy.critic_opt, lr)
    return value


def actor_objective(policy: SkillPolicy, feats: np.ndarray, noise: np.ndarray, tape: Tape):
    """Reparameterised ``E[Q(s, a) - alpha * log pi(a|s)]`` on ``tape``."""
    u, logp = _squash_tape(policy, tape, feats, noise)
    q = policy.critic.forward_tape(tape, nn.concat([feats, u], axis=1))
    return nn.mean(nn.sum_(q, axis=1) - nn.scale(logp, policy.alpha))


def actor_update(policy: SkillPolicy, batch, lr: float, rng: np.random.Generator) -> float:
    feats = batch["features"]
    noise = rng.standard_normal((feats.shape[0], ACTION_DIM))
    tape = Tape()
    objective = actor_objective(policy, feats, noise, tape)
    value = float(objective.value)
    if not math.isfinite(value):
        raise NonFiniteError(f"actor objective is {value}")
    tape.backward(-objective)
    adam_step(policy.actor.params, tape.gradients(policy.actor), policy.actor_opt, lr)
    return value


# ---------------------------------------------------------------------------
# stage-1 training loop


def command_for(option: OptionId, action: np.ndarray, obs: E.LowObservation) -> tuple[float, float]:
    """Turn a skill action into an environment command (signs the lane-change turn)."""
    if OptionId(option) == OptionId.LANE_CHANGE:
        d = obs.direction if obs.direction else 1
        return float(action[0]), float(d * action[1])
    return float(action[0]), float(action[1])


def _perturb(state: E.EnvState, option: OptionId, rng: np.random.Generator) -> E.EnvState:
    """Random start offsets so skills also learn to recover.

    In-lane skills start, part of the time, from the state a vehicle is in
    right after finishing a lane change: near the lane centre, fast, and
    steeply headed toward the nearer track edge.
    """
    state = state.copy()
    cfg = state.config
    w = cfg.lane_width
    mode = 0 if option == OptionId.LANE_CHANGE else rng.choice(3, p=[0.4, 0.2, 0.4])
    speed = rng.uniform(0.04, cfg.max_speed)
    if mode == 0:
        dy, dh = rng.uniform(-0.1, 0.1) * w, rng.uniform(-0.1, 0.1)
    elif mode == 1:
        dy, dh = rng.uniform(-0.2, 0.2) * w, rng.uniform(-0.3, 0.3)
    else:
        lo, hi = cfg.geometry.lateral_bounds
        sign = 1.0 if hi - state.y[0] < state.y[0] - lo else -1.0
        dy = sign * rng.uniform(0.0, 0.1) * w
        dh = sign * rng.uniform(0.6, cfg.heading_limit)
        speed = rng.uniform(0.1, cfg.max_speed)
    state.y[0] += dy
    state.heading[0] = float(np.clip(dh, -cfg.heading_limit, cfg.heading_limit))
    state.speed[0] = speed
    return state


def skill_env_config(episode_length: int = 30, **overrides) -> E.EnvConfig:
    overrides.setdefault("off_track_ends_episode", False)
    return E.single_vehicle_config(episode_length=episode_length, **overrides)


class SkillTrainer:
    """Runs the stage-1 loop for one option; :meth:`run` can be called repeatedly."""

    def __init__(self, option: OptionId, env_config: E.EnvConfig | None = None, seed: int = 0,
                 hyper: SkillHyper | None = None, perturb: bool = True):
        self.option = OptionId(option)
        self.config = env_config or skill_env_config()
        if self.config.n_vehicles != 1:
            raise ConfigError("skill training uses a single-vehicle environment")
        self.hyper = hyper or SkillHyper()
        self.rng = np.random.default_rng(seed)
        self.policy = SkillPolicy(self.option, self.hyper.hidden, self.hyper.alpha, self.rng)
        self.buffer = ArrayBuffer({
            "features": ((FEATURE_DIM,), float), "u": ((ACTION_DIM,), float),
            "reward": ((), float), "next_features": ((FEATURE_DIM,), float), "done": ((), float),
        }, self.hyper.buffer_capacity)
        self.perturb = perturb
        self.curve: list[float] = []
        self.episodes_done = 0

    def _episode(self) -> float:
        cfg, option, pol, hp = self.config, self.option, self.policy, self.hyper
        state, _, lows = E.reset(cfg, int(self.rng.integers(2**31)))
        if self.perturb:
            state = _perturb(state, option, self.rng)
        if option == OptionId.LANE_CHANGE:
            state = E.begin_lane_change(state, 0)
        obs = E.low_observation(state, 0)
        total = 0.0
        while True:
            action, _ = sample_action(pol, obs, self.rng)
            state, events = E.step(state, {0: command_for(option, action, obs)})
            next_obs = E.low_observation(state, 0)
            r = E.intrinsic_reward(option, next_obs, events, 0, cfg.beta, cfg.max_travel,
                                   cfg.lane_change_reward)
            if option == OptionId.LANE_CHANGE:
                done = bool(events.lane_change_completed or events.lane_change_failed or state.done)
            else:
                done = state.done
            self.buffer.push({
                "features": skill_features(option, obs), "u": pol.to_unit(action), "reward": r,
                "next_features": skill_features(option, next_obs), "done": float(done),
            })
            total += r
            batch = self.buffer.sample(hp.batch_size, self.rng)
            critic_update(pol, batch, hp.gamma, hp.lr, self.rng)
            actor_update(pol, batch, hp.lr, self.rng)
            obs = next_obs
            if done:
                break
        soft_update(pol.target_critic.params, pol.critic.params, hp.tau)
        return total

    def run(self, episodes: int) -> list[float]:
        new = [self._episode() for _ in range(int(episodes))]
        self.curve.extend(new)
        self.episodes_done += len(new)
        return new


def train_skill(env_config: E.EnvConfig | None, option: OptionId, episodes: int, seed: int,
                hyper: SkillHyper | None = None) -> tuple[SkillPolicy, list[float]]:
    trainer = SkillTrainer(option, env_config, seed, hyper)
    trainer.run(episodes)
    return trainer.policy, trainer.curve


@dataclass
class SkillReport:
    option: OptionId
    episodes: int
    mean_abs_deviation: float
    success_rate: float
    mean_speed: float


def evaluate_skill(policy: SkillPolicy | None, option: OptionId, env_config: E.EnvConfig | None = None,
                   episodes: int = 20, seed: int = 0) -> SkillReport:
    """Greedy rollouts from the standard (unperturbed) reset.

    ``mean_abs_deviation`` averages |lateral deviation| over every step of
    every episode; ``success_rate`` is the fraction of lane changes that
    completed (only meaningful for LaneChange).
    """
    option = OptionId(option)
    cfg = env_config or skill_env_config()
    rng = np.random.default_rng(seed)
    devs, speeds, successes = [], [], 0
    for _ in range(episodes):
        state, _, _ = E.reset(cfg, int(rng.integers(2**31)))
        if option == OptionId.LANE_CHANGE:
            state = E.begin_lane_change(state, 0)
        obs = E.low_observation(state, 0)
        while not state.done:
            if option == OptionId.KEEP_LANE:
                cmd = (float(state.speed[0]), float(state.omega[0]))
            else:
                cmd = command_for(option, greedy_action(policy, obs), obs)
            state, events = E.step(state, {0: cmd})
            obs = E.low_observation(state, 0)
            devs.append(abs(obs.lateral_deviation))
            speeds.append(float(state.speed[0]))
            if option == OptionId.LANE_CHANGE:
                if events.lane_change_completed:
                    successes += 1
                    break
                if events.lane_change_failed:
                    break
    return SkillReport(option, episodes, float(np.mean(devs)), successes / episodes,
                       float(np.mean(speeds)))


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST_NAME = "skills.json"


def save_skill(directory, policy: SkillPolicy) -> dict[str, str]:
    """Write actor, critic and target critic; returns file names keyed by role."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = policy.option.name.lower()
    meta = {"option": policy.option.name, "alpha": policy.alpha}
    files = {"actor": f"{stem}_actor.ckpt", "critic": f"{stem}_critic.ckpt",
             "target_critic": f"{stem}_target_critic.ckpt"}
    nn.save_network(directory / files["actor"], policy.actor, policy.actor_opt, meta)
    nn.save_network(directory / files["critic"], policy.critic, policy.critic_opt, meta)
    nn.save_network(directory / files["target_critic"], policy.target_critic, None, meta)
    return files


def write_manifest(directory, entries: dict[OptionId, dict[str, str] | None]) -> Path:
    """``skills.json``: option name -> checkpoint files (``null`` for KeepLane)."""
    path = Path(directory) / MANIFEST_NAME
    body = {OptionId(k).name: v for k, v in sorted(entries.items())}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def load_skill(directory, files: dict[str, str]) -> SkillPolicy:
    directory = Path(directory)
    actor, actor_opt, meta = nn.load_network(directory / files["actor"])
    critic, critic_opt, _ = nn.load_network(directory / files["critic"])
    target, _, _ = nn.load_network(directory / files["target_critic"])
    policy = SkillPolicy.__new__(SkillPolicy)
    policy.option = OptionId[meta["option"]]
    policy.alpha = float(meta["alpha"])
    (l_lo, l_hi), (a_lo, a_hi) = action_bounds(policy.option)
    policy.low, policy.high = np.array([l_lo, a_lo]), np.array([l_hi, a_hi])
    policy.actor, policy.critic, policy.target_critic = actor, critic, target
    policy.actor_opt = actor_opt or AdamState.for_params(actor.params)
    policy.critic_opt = critic_opt or AdamState.for_params(critic.params)
    return policy


def load_skills(directory) -> dict[OptionId, SkillPolicy | None]:
    """Read the manifest in ``directory``; every option must be listed."""
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no skill manifest at {path}")
    body = json.loads(path.read_text())
    skills: dict[OptionId, SkillPolicy | None] = {OptionId.KEEP_LANE: None}
    for opt in LEARNED_OPTIONS:
        files = body.get(opt.name)
        if not files:
            raise ConfigError(f"manifest {path} has no checkpoint for {opt.name}")
        try:
            skills[opt] = load_skill(directory, files)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load {opt.name} skill: {exc}") from exc
    return skills
