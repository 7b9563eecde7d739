import math

import numpy as np
import pytest

from hero import nn
from hero.errors import ConfigError, HeroError
from hero.high_agent import (HighPolicy, HighTransition, actor_objective, actor_update, critic_update,
                             option_log_probs, option_values, select_option, td_target, to_batch)
from hero.nn import MlpNetwork, Tape
from hero.opponent import OpponentNet
from hero.options import OptionId

DIM = 5


def fixed_logits(net, logits):
    net.params[-2][...] = 0.0
    net.params[-1][...] = logits


def transition(reward=1.0, terminal=False, duration=2, own=0, others=(0,), seed=0):
    rng = np.random.default_rng(seed)
    return HighTransition(rng.random(DIM), OptionId(own), [OptionId(o) for o in others], reward, duration,
                          rng.random(DIM), terminal)


def test_input_widths():
    p = HighPolicy(0, 38, 3, rng=0)
    assert p.actor.input_dim == 38 + 12 and p.critic.input_dim == 38 + 4 + 12
    with pytest.raises(ConfigError):
        HighPolicy(0, 38, 1, gamma=1.0)


def test_single_available_option():
    p = HighPolicy(0, DIM, 0, rng=0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        o, lp = select_option(p, rng.random(DIM), np.zeros(0), {OptionId.ACCELERATE}, rng)
        assert o == OptionId.ACCELERATE and lp == 0.0


def test_uniform_logits_sample_uniformly():
    p = HighPolicy(0, DIM, 0, rng=0)
    fixed_logits(p.actor, np.zeros(4))
    rng = np.random.default_rng(1)
    x = np.zeros(DIM)
    draws = [int(select_option(p, x, np.zeros(0), set(OptionId), rng)[0]) for _ in range(100_000)]
    freq = np.bincount(draws, minlength=4) / 1e5
    assert np.all((freq > 0.24) & (freq < 0.26))


def test_greedy_argmax_and_ties():
    p = HighPolicy(0, DIM, 0, rng=0)
    fixed_logits(p.actor, np.array([2.0, 1.0, 1.0, 1.0]))
    assert select_option(p, np.zeros(DIM), np.zeros(0), set(OptionId), None, greedy=True)[0] == 0
    fixed_logits(p.actor, np.array([0.0, 1.0, 1.0, 0.0]))
    assert select_option(p, np.zeros(DIM), np.zeros(0), set(OptionId), None, greedy=True)[0] == 1


def test_mask_excludes_unavailable():
    p = HighPolicy(0, DIM, 1, rng=0)
    fixed_logits(p.actor, np.array([-5.0, 0.0, 0.0, 40.0]))
    lp = option_log_probs(p.actor, np.zeros(DIM), np.zeros(4), np.array([True, True, True, False]))
    assert np.exp(lp[3]) <= 1e-12 and np.isclose(np.exp(lp).sum(), 1.0)
    with pytest.raises(HeroError):
        select_option(p, np.zeros(DIM), np.zeros(4), set(), np.random.default_rng(0))


def test_td_target_examples():
    p = HighPolicy(0, DIM, 1, gamma=0.95, rng=0)
    models = {1: OpponentNet(0, 1, DIM, rng=1)}
    assert td_target(p, models, [transition(2.0, terminal=True)])[0] == 2.0
    assert td_target(p, models, [transition(1.5)], gamma=0.0)[0] == 1.5
    fixed_logits(p.target_critic, np.array([2.0]))
    assert td_target(p, models, [transition(1.5, duration=4)])[0] == pytest.approx(3.4)
    q = HighPolicy(0, DIM, 1, gamma=0.95, discount="duration", rng=0)
    fixed_logits(q.target_critic, np.array([2.0]))
    assert td_target(q, models, [transition(1.5, duration=4)])[0] == pytest.approx(1.5 + 0.95**4 * 2)


def test_gamma_zero_target_is_reward_for_every_transition():
    p = HighPolicy(0, DIM, 1, gamma=0.0, rng=0)
    ts = [transition(r, terminal=bool(k % 2), seed=k) for k, r in enumerate(np.linspace(-3, 3, 9))]
    assert np.array_equal(td_target(p, {1: OpponentNet(0, 1, DIM, rng=1)}, ts), to_batch(ts)["reward"])


def test_zero_critic_terminal_zero_reward_loss():
    p = HighPolicy(0, DIM, 1, rng=0)
    fixed_logits(p.critic, np.zeros(1))
    ts = [transition(0.0, terminal=True, seed=k) for k in range(8)]
    assert critic_update(p, ts, {1: OpponentNet(0, 1, DIM, rng=1)}, 0.01) == pytest.approx(0.0, abs=1e-15)


def test_single_transition_converges():
    p = HighPolicy(0, DIM, 1, rng=0)
    models = {1: OpponentNet(0, 1, DIM, rng=1)}
    t = transition(1.3, terminal=True)
    for _ in range(200):
        critic_update(p, [t], models, 0.01)
    x = np.concatenate([t.obs, np.eye(4)[0], np.eye(4)[0]])
    assert abs(p.critic.forward(x)[0] - 1.3) < 0.05


def test_actor_requires_critic_update():
    p = HighPolicy(0, DIM, 1, rng=0)
    with pytest.raises(HeroError):
        actor_update(p, [transition()], {1: OpponentNet(0, 1, DIM, rng=1)}, 0.01)


def toy_batch(n=4):
    rng = np.random.default_rng(0)
    mask = np.zeros((n, 4), bool)
    mask[:, :2] = True
    return rng.random((n, DIM)), mask


def test_better_option_gains_probability():
    p = HighPolicy(0, DIM, 0, rng=0)
    obs, mask = toy_batch()
    q = np.tile([1.0, 0.0, 0.0, 0.0], (4, 1))
    before = np.exp(option_log_probs(p.actor, obs, np.zeros((4, 0)), mask))[:, 0]
    tape = Tape()
    surrogate, _ = actor_objective(p, obs, np.zeros((4, 0)), mask, q, tape)
    tape.backward(surrogate)
    nn.adam_step(p.actor.params, [-g for g in tape.gradients(p.actor)], p.actor_opt, 0.01)
    after = np.exp(option_log_probs(p.actor, obs, np.zeros((4, 0)), mask))[:, 0]
    assert np.all(after > before)


def test_equal_values_leave_actor_unchanged():
    p = HighPolicy(0, DIM, 1, rng=0)
    models = {1: OpponentNet(0, 1, DIM, rng=1)}
    fixed_logits(p.critic, np.array([0.7]))
    p.critic_updates = 1
    ts = [transition(seed=k) for k in range(6)]
    obs = to_batch(ts)["obs"]
    opp = np.stack([nn.log_softmax_np(models[1].net.raw(o)) for o in obs])
    before = option_log_probs(p.actor, obs, opp, np.ones((6, 4), bool))
    actor_update(p, ts, models, 0.01)
    after = option_log_probs(p.actor, obs, opp, np.ones((6, 4), bool))
    assert np.max(np.abs(np.exp(after) - np.exp(before))) < 1e-6


def test_actor_gradient_matches_finite_differences_and_baseline_is_unbiased():
    p = HighPolicy(0, 2, 0, rng=0)
    p.actor = MlpNetwork([2, 4], "softmax", rng=3)
    obs, mask = np.random.default_rng(1).random((3, 2)), np.ones((3, 4), bool)
    q = np.random.default_rng(2).standard_normal((3, 4))
    adv = q - q.mean()

    def expected_objective():
        probs = np.exp(option_log_probs(p.actor, obs, np.zeros((3, 0)), mask))
        return float((probs * adv).sum(axis=1).mean())

    grads = []
    for shift in (0.0, 5.0):
        tape = Tape()
        surrogate, _ = actor_objective(p, obs, np.zeros((3, 0)), mask, q + shift, tape)
        tape.backward(surrogate)
        grads.append(tape.gradients(p.actor))
    for param, g, g_shift in zip(p.actor.params, *grads):
        num = np.zeros_like(param)
        for i in np.ndindex(param.shape):
            old = param[i]
            param[i] = old + 1e-6
            up = expected_objective()
            param[i] = old - 1e-6
            down = expected_objective()
            param[i] = old
            num[i] = (up - down) / 2e-6
        assert np.allclose(g, num, rtol=1e-3, atol=1e-9)
        assert np.allclose(g, g_shift, atol=1e-12)


def test_option_values_sweep_own_option():
    p = HighPolicy(0, DIM, 1, rng=0)
    obs = np.random.default_rng(0).random((3, DIM))
    others = np.array([[2], [0], [3]])
    q = option_values(p.critic, obs, others)
    for o in range(4):
        x = np.concatenate([obs, np.tile(np.eye(4)[o], (3, 1)), np.eye(4)[others[:, 0]]], axis=1)
        assert np.allclose(q[:, o], p.critic.forward(x)[:, 0])


# --- three-state option chain ------------------------------------------------

# (state, option) -> (reward accumulated over the option, duration, next state, terminal)
CHAIN = {
    (0, 0): (1.0, 2, 1, False), (0, 1): (0.5, 3, 2, False),
    (1, 0): (2.0, 1, 2, False), (1, 1): (-1.0, 4, 2, False),
    (2, 0): (0.3, 1, 2, True), (2, 1): (-0.2, 2, 2, True),
}
POLICY = {0: 0, 1: 0, 2: 0}  # the frozen actor always picks option 0


def chain_values(gamma, per_duration):
    """Brute-force semi-MDP policy evaluation by repeated sweeps."""
    q = {k: 0.0 for k in CHAIN}
    for _ in range(1000):
        new = {}
        for (s, o), (r, c, s2, term) in CHAIN.items():
            disc = gamma**c if per_duration else gamma
            new[(s, o)] = r + (0.0 if term else disc * q[(s2, POLICY[s2])])
        q = new
    return q


def run_chain(discount):
    gamma = 0.9
    p = HighPolicy(0, 3, 0, hidden=16, gamma=gamma, discount=discount, rng=0)
    fixed_logits(p.actor, np.array([30.0, 0.0, -1e3, -1e3]))
    fixed_logits(p.target_actor, np.array([30.0, 0.0, -1e3, -1e3]))
    mask = np.array([True, True, False, False])
    ts = [HighTransition(np.eye(3)[s], OptionId(o), [], r, c, np.eye(3)[s2], term, mask, mask)
          for (s, o), (r, c, s2, term) in CHAIN.items()]
    batch = to_batch(ts)
    for k in range(4000):
        critic_update(p, batch, {}, 0.01 if k < 3000 else 0.002)
        nn.soft_update(p.target_critic.params, p.critic.params, 0.05)
    learned = {(s, o): float(p.critic.forward(np.concatenate([np.eye(3)[s], np.eye(4)[o]]))[0])
               for (s, o) in CHAIN}
    return learned, chain_values(gamma, discount == "duration")


@pytest.mark.parametrize("discount", ["option", "duration"])
def test_chain_critic_matches_value_iteration(discount):
    learned, oracle = run_chain(discount)
    for k in CHAIN:
        assert abs(learned[k] - oracle[k]) < 1e-3, (k, learned[k], oracle[k])


def test_chain_oracle_hand_values():
    q = chain_values(0.9, False)
    assert q[(2, 0)] == pytest.approx(0.3)
    assert q[(1, 0)] == pytest.approx(2.0 + 0.9 * 0.3)
    assert q[(0, 0)] == pytest.approx(1.0 + 0.9 * (2.0 + 0.9 * 0.3))
    assert chain_values(0.9, True)[(0, 1)] == pytest.approx(0.5 + 0.9**3 * 0.3)
