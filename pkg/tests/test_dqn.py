import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hero.dqn import DqnAgent, LinearEpsilon, dqn_targets, dqn_update, epsilon_greedy
from hero.errors import ConfigError, HeroError
from hero.high_agent import HighTransition
from hero.options import OptionId

DIM = 4


def constant_q(net, values):
    net.params[-2][...] = 0.0
    net.params[-1][...] = values


def tr(reward, terminal=False, own=0, next_mask=None, seed=0, duration=3):
    rng = np.random.default_rng(seed)
    if next_mask is None:
        next_mask = np.ones(4, bool)
    return HighTransition(rng.random(DIM), OptionId(own), [], reward, duration, rng.random(DIM), terminal,
                          np.ones(4, bool), next_mask)


def test_full_exploration_is_uniform_over_available():
    agent = DqnAgent(0, DIM, rng=0)
    rng = np.random.default_rng(0)
    allowed = {OptionId.KEEP_LANE, OptionId.SLOW_DOWN, OptionId.LANE_CHANGE}
    draws = np.array([epsilon_greedy(agent, np.zeros(DIM), allowed, rng, 1.0) for _ in range(30_000)])
    assert not np.any(draws == OptionId.ACCELERATE)
    freq = np.bincount(draws, minlength=4)[[0, 1, 3]] / len(draws)
    assert np.allclose(freq, 1 / 3, atol=0.015)


def test_greedy_picks_argmax_and_breaks_ties_low():
    agent = DqnAgent(0, DIM, rng=0)
    rng = np.random.default_rng(0)
    constant_q(agent.q_net, [0.0, 3.0, 1.0, 2.0])
    assert epsilon_greedy(agent, np.zeros(DIM), set(OptionId), rng, 0.0) == OptionId.SLOW_DOWN
    assert epsilon_greedy(agent, np.zeros(DIM), {0, 2, 3}, rng, 0.0) == OptionId.LANE_CHANGE
    constant_q(agent.q_net, [1.0, 5.0, 5.0, 5.0])
    assert epsilon_greedy(agent, np.zeros(DIM), set(OptionId), rng, 0.0) == OptionId.SLOW_DOWN


def test_no_available_option_raises():
    with pytest.raises(HeroError):
        epsilon_greedy(DqnAgent(0, DIM, rng=0), np.zeros(DIM), set(), np.random.default_rng(0), 0.0)


def test_terminal_target_is_reward():
    agent = DqnAgent(0, DIM, rng=0)
    constant_q(agent.target_net, [9.0, 9.0, 9.0, 9.0])
    assert dqn_targets(agent, [tr(-20.0, terminal=True)])[0] == -20.0


def test_bootstrap_max_only_over_next_available():
    agent = DqnAgent(0, DIM, gamma=0.95, rng=0)
    constant_q(agent.target_net, [1.0, 4.0, 2.0, 8.0])
    mask = np.array([True, True, True, False])
    assert dqn_targets(agent, [tr(0.5, next_mask=mask)])[0] == pytest.approx(0.5 + 0.95 * 4.0)
    d = DqnAgent(0, DIM, gamma=0.95, discount="duration", rng=0)
    constant_q(d.target_net, [1.0, 4.0, 2.0, 8.0])
    assert dqn_targets(d, [tr(0.5, next_mask=mask, duration=3)])[0] == pytest.approx(0.5 + 0.95**3 * 4.0)


def test_zero_gamma_recovers_mean_reward():
    # with gamma 0 the Q value of a fixed (obs, option) pair is the least-squares fit of its rewards
    agent = DqnAgent(0, DIM, gamma=0.0, rng=0)
    rng = np.random.default_rng(0)
    obs = np.full(DIM, 0.5)
    rewards = rng.normal(2.0, 0.5, 16)
    batch = [HighTransition(obs, OptionId.SLOW_DOWN, [], r, 1, obs, False) for r in rewards]
    for _ in range(600):
        dqn_update(agent, batch, 0.01)
    assert agent.q_net.forward(obs)[1] == pytest.approx(rewards.mean(), abs=0.02)


def test_repeated_updates_on_one_transition_converge():
    agent = DqnAgent(0, DIM, rng=0)
    t = tr(-20.0, terminal=True, own=2)
    for _ in range(200):
        dqn_update(agent, [t], 0.01)
    assert abs(agent.q_net.forward(t.obs)[2] + 20.0) < 0.05 * 20


def test_schedule():
    s = LinearEpsilon(1.0, 0.05, 100)
    values = [s(e) for e in range(300)]
    assert values[0] == 1.0 and values[100] == pytest.approx(0.05) and values[-1] >= 0.01
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert LinearEpsilon.for_budget(2000).decay_episodes == 1000
    with pytest.raises(ConfigError):
        LinearEpsilon(0.1, 0.5, 10)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(6)))
def test_update_is_order_invariant(perm):
    # the loss is a batch mean, so shuffling the batch leaves the update unchanged
    batch = [tr(float(k) - 2.5, terminal=k % 2 == 0, own=k % 4, seed=k) for k in range(6)]
    a, b = DqnAgent(0, DIM, rng=1), DqnAgent(0, DIM, rng=1)
    la = dqn_update(a, batch, 0.01)
    lb = dqn_update(b, [batch[i] for i in perm], 0.01)
    assert la == pytest.approx(lb, rel=1e-12)
    for p, q in zip(a.q_net.params, b.q_net.params):
        assert np.allclose(p, q, atol=1e-12)
