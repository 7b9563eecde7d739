"""Decentralized high-level actor-critic over options.

Per agent:

* the actor reads the observation plus the opponent feature vector (the
  predicted log-probabilities of every other vehicle) and outputs a softmax
  over the four options, with unavailable options masked out;
* the critic reads the observation, a one-hot of the agent's own option and
  one-hots of the options the others were running, and outputs a scalar.

A transition spans a whole option: the reward is the sum of the per-step
high-level rewards while it ran.  The bootstrap is discounted once per
option boundary by default (``discount="option"``); ``discount="duration"``
uses ``gamma ** c`` instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hero import nn
from hero.errors import ConfigError, HeroError, NonFiniteError
from hero.nn import AdamState, MlpNetwork, Tape, adam_step
from hero.opponent import OpponentNet, infer_all
from hero.options import N_OPTIONS, OptionId
from hero.replay import ArrayBuffer

MASK_PENALTY = -1e9
DISCOUNT_MODES = ("option", "duration")


def one_hot(index, n: int = N_OPTIONS) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros(index.shape + (n,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def others_one_hot(others: np.ndarray) -> np.ndarray:
    """(B, k) option ids -> (B, 4k) concatenated one-hots."""
    others = np.asarray(others, dtype=np.int64)
    return one_hot(others).reshape(others.shape[:-1] + (N_OPTIONS * others.shape[-1],))


def mask_to_penalty(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 0.0, MASK_PENALTY)


def as_mask(available) -> np.ndarray:
    """Bool mask from a mask array or an iterable of option ids."""
    if isinstance(available, np.ndarray) and available.dtype == bool:
        mask = available
    else:
        mask = np.zeros(N_OPTIONS, dtype=bool)
        for o in available:
            mask[int(o)] = True
    if not mask.any(axis=-1).all():
        raise HeroError("no option is available")
    return mask


@dataclass
class HighTransition:
    obs: np.ndarray
    own_option: OptionId
    others_options: Sequence[OptionId]
    accumulated_reward: float
    duration: int
    next_obs: np.ndarray
    terminal: bool
    mask: np.ndarray = field(default_factory=lambda: np.ones(N_OPTIONS, dtype=bool))
    next_mask: np.ndarray = field(default_factory=lambda: np.ones(N_OPTIONS, dtype=bool))

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("duration must be >= 1")

    def record(self) -> dict:
        return {
            "obs": np.asarray(self.obs, float), "own": int(self.own_option),
            "others": np.asarray([int(o) for o in self.others_options], dtype=np.int64),
            "reward": float(self.accumulated_reward), "duration": int(self.duration),
            "next_obs": np.asarray(self.next_obs, float), "terminal": float(self.terminal),
            "mask": np.asarray(self.mask, bool), "next_mask": np.asarray(self.next_mask, bool),
        }


def transition_fields(obs_dim: int, n_others: int) -> dict:
    return {
        "obs": ((obs_dim,), float), "own": ((), np.int64), "others": ((n_others,), np.int64),
        "reward": ((), float), "duration": ((), np.int64), "next_obs": ((obs_dim,), float),
        "terminal": ((), float), "mask": ((N_OPTIONS,), bool), "next_mask": ((N_OPTIONS,), bool),
    }


def to_batch(batch) -> dict[str, np.ndarray]:
    """Accepts a column dict or a list of :class:`HighTransition`."""
    if isinstance(batch, Mapping):
        return batch
    records = [t.record() for t in batch]
    if not records:
        raise ValueError("empty batch")
    return {k: np.stack([r[k] for r in records]) for k in records[0]}


class HighPolicy:
    def __init__(self, agent_id: int, obs_dim: int, n_others: int, hidden: int = 32,
                 gamma: float = 0.95, discount: str = "option", rng=None):
        if not 0.0 <= gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if discount not in DISCOUNT_MODES:
            raise ConfigError(f"discount must be one of {DISCOUNT_MODES}")
        rng = np.random.default_rng(rng)
        self.agent_id = int(agent_id)
        self.obs_dim, self.n_others = int(obs_dim), int(n_others)
        self.gamma, self.discount = float(gamma), discount
        k = N_OPTIONS * self.n_others
        self.actor = MlpNetwork([obs_dim + k, hidden, hidden, N_OPTIONS], "softmax", rng)
        self.critic = MlpNetwork([obs_dim + N_OPTIONS + k, hidden, hidden, 1], "linear", rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = AdamState.for_params(self.actor.params)
        self.critic_opt = AdamState.for_params(self.critic.params)
        self.critic_updates = 0

    def soft_update(self, tau: float) -> None:
        nn.soft_update(self.target_actor.params, self.actor.params, tau)
        nn.soft_update(self.target_critic.params, self.critic.params, tau)


def option_log_probs(actor: MlpNetwork, obs, opp_features, mask) -> np.ndarray:
    x = np.concatenate([np.asarray(obs, float), np.asarray(opp_features, float)], axis=-1)
    return nn.log_softmax_np(actor.raw(x), mask_to_penalty(mask))


def select_option(policy: HighPolicy, obs, opp_features, available, rng: np.random.Generator,
                  greedy: bool = False) -> tuple[OptionId, float]:
    """Masked softmax choice; argmax with ties to the lowest id when ``greedy``."""
    mask = as_mask(available)
    logp = option_log_probs(policy.actor, obs, opp_features, mask)
    if not np.all(np.isfinite(logp[mask])):
        raise NonFiniteError(f"agent {policy.agent_id}: actor produced {logp}")
    choice = int(np.argmax(logp)) if greedy else nn.sample_categorical(logp, rng)
    return OptionId(choice), float(logp[choice])


def _opponent_block(opponent_models, obs: np.ndarray, n_others: int) -> np.ndarray:
    if n_others == 0:
        return np.zeros(obs.shape[:-1] + (0,))
    return infer_all(opponent_models, obs)


def bootstrap_values(policy: HighPolicy, opponent_models: Mapping[int, OpponentNet],
                     next_obs: np.ndarray, next_mask: np.ndarray) -> np.ndarray:
    """Target critic at the next observation under predicted option distributions.

    Our own option enters as the target actor's probabilities; the others as
    the opponent models' predicted distributions, used as-is rather than
    sampled.  Both are fed in probability space, matching the one-hot scale
    the critic is trained on.
    """
    opp_logp = _opponent_block(opponent_models, next_obs, policy.n_others)
    own = np.exp(option_log_probs(policy.target_actor, next_obs, opp_logp, next_mask))
    x = np.concatenate([next_obs, own, np.exp(opp_logp)], axis=-1)
    return policy.target_critic.forward(x)[..., 0]


def td_target(policy: HighPolicy, opponent_models, transitions, gamma: float | None = None) -> np.ndarray:
    b = to_batch(transitions)
    gamma = policy.gamma if gamma is None else float(gamma)
    reward = np.asarray(b["reward"], float)
    live = 1.0 - np.asarray(b["terminal"], float)
    if gamma == 0.0:
        return reward.copy()
    v = bootstrap_values(policy, opponent_models, np.asarray(b["next_obs"], float),
                         np.asarray(b["next_mask"], bool))
    disc = gamma ** np.asarray(b["duration"], float) if policy.discount == "duration" else gamma
    return reward + disc * live * v


def critic_input(obs, own, others) -> np.ndarray:
    return np.concatenate([np.asarray(obs, float), one_hot(own), others_one_hot(others)], axis=-1)


def critic_update(policy: HighPolicy, batch, opponent_models, lr: float) -> float:
    b = to_batch(batch)
    y = td_target(policy, opponent_models, b)
    tape = Tape()
    q = policy.critic.forward_tape(tape, critic_input(b["obs"], b["own"], b["others"]))
    loss = nn.mean(nn.square(nn.columns(q, 0, 1) - y[:, None]))
    value = float(loss.value)
    if not np.isfinite(value):
        raise NonFiniteError(f"agent {policy.agent_id}: critic loss is {value}")
    tape.backward(loss)
    adam_step(policy.critic.params, tape.gradients(policy.critic), policy.critic_opt, lr)
    policy.critic_updates += 1
    return value


def option_values(critic: MlpNetwork, obs: np.ndarray, others: np.ndarray) -> np.ndarray:
    """(B, 4) critic values with our own option swept over all four."""
    obs = np.asarray(obs, float)
    n = obs.shape[0]
    rest = others_one_hot(others)
    rows = [np.concatenate([obs, np.broadcast_to(one_hot(o), (n, N_OPTIONS)), rest], axis=1)
            for o in range(N_OPTIONS)]
    return critic.forward(np.concatenate(rows, axis=0))[:, 0].reshape(N_OPTIONS, n).T


def actor_objective(policy: HighPolicy, obs, opp_features, mask, q: np.ndarray, tape: Tape):
    """Tape node whose gradient is the batch policy gradient.

    The expectation over our own option is taken exactly, the sum over all
    available options weighted by the current probabilities, with the
    batch-mean value subtracted as a baseline.
    """
    x = np.concatenate([np.asarray(obs, float), np.asarray(opp_features, float)], axis=-1)
    logp = nn.log_softmax(policy.actor.raw_tape(tape, x), mask_to_penalty(mask))
    probs = np.exp(logp.value)
    adv = np.where(mask, q - q[mask].mean(), 0.0)
    weights = probs * adv
    return nn.scale(nn.sum_(logp * weights), 1.0 / q.shape[0]), float((weights).sum(axis=1).mean())


def actor_update(policy: HighPolicy, batch, opponent_models, lr: float) -> float:
    if policy.critic_updates == 0:
        raise HeroError("update the critic before the actor")
    b = to_batch(batch)
    obs = np.asarray(b["obs"], float)
    mask = np.asarray(b["mask"], bool)
    q = option_values(policy.critic, obs, b["others"])
    opp = _opponent_block(opponent_models, obs, policy.n_others)
    tape = Tape()
    surrogate, estimate = actor_objective(policy, obs, opp, mask, q, tape)
    if not np.isfinite(surrogate.value):
        raise NonFiniteError(f"agent {policy.agent_id}: actor objective is {surrogate.value}")
    tape.backward(surrogate)
    grads = [-g for g in tape.gradients(policy.actor)]
    adam_step(policy.actor.params, grads, policy.actor_opt, lr)
    return estimate


def new_buffer(obs_dim: int, n_others: int, capacity: int) -> ArrayBuffer:
    return ArrayBuffer(transition_fields(obs_dim, n_others), capacity)
