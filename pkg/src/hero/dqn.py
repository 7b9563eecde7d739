"""Independent deep Q-learning over the same options and frozen skills.

Each agent learns from its own observation and the team reward only; it
never sees the other vehicles' options.  Exploration is epsilon-greedy
with a linear decay.
"""
from __future__ import annotations

import numpy as np

from hero import nn
from hero.errors import ConfigError, HeroError, NonFiniteError
from hero.high_agent import DISCOUNT_MODES, as_mask, to_batch
from hero.nn import AdamState, MlpNetwork, Tape, adam_step
from hero.options import N_OPTIONS, OptionId


class LinearEpsilon:
    """``start`` -> ``end`` linearly over ``decay_episodes``, then flat."""

    def __init__(self, start: float = 1.0, end: float = 0.05, decay_episodes: int = 7000):
        if not 0.0 <= end <= start <= 1.0:
            raise ConfigError("need 0 <= end <= start <= 1")
        self.start, self.end = float(start), float(end)
        self.decay_episodes = max(int(decay_episodes), 1)

    def __call__(self, episode: int) -> float:
        frac = min(max(episode, 0) / self.decay_episodes, 1.0)
        return self.start + frac * (self.end - self.start)

    @classmethod
    def for_budget(cls, episodes: int) -> "LinearEpsilon":
        return cls(1.0, 0.05, max(episodes // 2, 1))


class DqnAgent:
    def __init__(self, agent_id: int, obs_dim: int, hidden: int = 32, gamma: float = 0.95,
                 epsilon: float = 1.0, discount: str = "option", rng=None):
        if not 0.0 <= gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if discount not in DISCOUNT_MODES:
            raise ConfigError(f"discount must be one of {DISCOUNT_MODES}")
        self.agent_id = int(agent_id)
        self.gamma, self.discount = float(gamma), discount
        self.epsilon = float(epsilon)
        self.q_net = MlpNetwork([obs_dim, hidden, hidden, N_OPTIONS], "linear", np.random.default_rng(rng))
        self.target_net = self.q_net.copy()
        self.opt = AdamState.for_params(self.q_net.params)

    def soft_update(self, tau: float) -> None:
        nn.soft_update(self.target_net.params, self.q_net.params, tau)


def epsilon_greedy(agent: DqnAgent, obs, available, rng: np.random.Generator,
                   epsilon: float | None = None) -> OptionId:
    mask = as_mask(available)
    eps = agent.epsilon if epsilon is None else epsilon
    allowed = np.flatnonzero(mask)
    # always draw once so the stream does not depend on the branch taken
    u = rng.random()
    if u < eps:
        return OptionId(int(allowed[rng.integers(len(allowed))]))
    q = agent.q_net.forward(np.asarray(getattr(obs, "vector", obs), float))
    if not np.all(np.isfinite(q)):
        raise NonFiniteError(f"agent {agent.agent_id}: Q values {q}")
    return OptionId(int(allowed[np.argmax(q[allowed])]))


def dqn_targets(agent: DqnAgent, batch) -> np.ndarray:
    b = to_batch(batch)
    reward = np.asarray(b["reward"], float)
    if agent.gamma == 0.0:
        return reward.copy()
    q_next = agent.target_net.forward(np.asarray(b["next_obs"], float))
    q_next = np.where(np.asarray(b["next_mask"], bool), q_next, -np.inf).max(axis=1)
    live = 1.0 - np.asarray(b["terminal"], float)
    q_next = np.where(live > 0, q_next, 0.0)
    disc = agent.gamma ** np.asarray(b["duration"], float) if agent.discount == "duration" else agent.gamma
    return reward + disc * live * q_next


def dqn_update(agent: DqnAgent, batch, lr: float) -> float:
    b = to_batch(batch)
    if len(b["reward"]) == 0:
        raise HeroError("empty batch")
    y = dqn_targets(agent, b)
    tape = Tape()
    q = agent.q_net.forward_tape(tape, np.asarray(b["obs"], float))
    q_taken = nn.pick(q, np.asarray(b["own"], np.int64))
    loss = nn.mean(nn.square(q_taken - y))
    value = float(loss.value)
    if not np.isfinite(value):
        raise NonFiniteError(f"agent {agent.agent_id}: DQN loss is {value}")
    tape.backward(loss)
    adam_step(agent.q_net.params, tape.gradients(agent.q_net), agent.opt, lr)
    return value

