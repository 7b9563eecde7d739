"""Stage-2 episode loop shared by HERO training, the DQN baseline and evaluation.

Every learning vehicle runs one option at a time.  Each step the running
option's frozen skill produces the primitive command; when an option
terminates, the agent stores a semi-MDP transition and picks a new option
straight away, independently of everyone else.  Scripted vehicles are
treated as agents that always run KeepLane.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from hero import env as E
from hero import low_agent
from hero.config import Hyper
from hero.dqn import DqnAgent, LinearEpsilon, dqn_update, epsilon_greedy
from hero.errors import ConfigError
from hero.nn import load_network, save_network
from hero.high_agent import (HighPolicy, HighTransition, actor_update, critic_update, new_buffer,
                             select_option)
from hero.opponent import OpponentBank
from hero.options import (LEARNED_OPTIONS, OptionExecution, OptionId, availability_mask, option_specs,
                          terminated)


class HeroTeam:
    """One actor-critic plus one opponent bank per learning vehicle."""

    kind = "hero"

    def __init__(self, config: E.EnvConfig, hyper: Hyper, rng: np.random.Generator):
        self.config, self.hyper = config, hyper
        self.streams = None  # (environment seeds, learning) generators of a training run
        n = config.n_vehicles
        dim = config.high_obs_dim
        self.learners = config.learner_ids
        self.policies: dict[int, HighPolicy] = {}
        self.banks: dict[int, OpponentBank] = {}
        self.buffers = {}
        for i in self.learners:
            others = [j for j in range(n) if j != i]
            self.policies[i] = HighPolicy(i, dim, len(others), hyper.hidden_dim, hyper.discount_factor,
                                          hyper.discount_mode, rng)
            self.banks[i] = OpponentBank(i, others, dim, hyper.hidden_dim, hyper.opponent_entropy_weight,
                                         hyper.buffer_capacity, rng)
            self.buffers[i] = new_buffer(dim, len(others), hyper.buffer_capacity)

    def refresh(self, subjects, highs: Mapping) -> None:
        """Owners re-predict the subjects that are about to pick a new option."""
        for i in self.learners:
            for j in subjects:
                if j != i:
                    self.banks[i].refresh(j, highs[i].vector)

    def record(self, subject: int, option: OptionId, highs: Mapping) -> None:
        for i in self.learners:
            if i != subject:
                self.banks[i].observe(subject, highs[i].vector, option)

    def choose(self, vid: int, obs: E.HighObservation, mask, rng, greedy: bool, episode: int) -> OptionId:
        option, _ = select_option(self.policies[vid], obs.vector, self.banks[vid].held_features(), mask,
                                  rng, greedy)
        return option

    def store(self, vid: int, transition: HighTransition) -> None:
        self.buffers[vid].push(transition.record())

    def learn(self, rng: np.random.Generator) -> None:
        hp = self.hyper
        for i in self.learners:
            if not len(self.buffers[i]):
                continue
            models = self.banks[i].models
            batch = self.buffers[i].sample(hp.batch_size, rng)
            critic_update(self.policies[i], batch, models, hp.learning_rate)
            actor_update(self.policies[i], batch, models, hp.learning_rate)
            self.banks[i].train_step(hp.batch_size, hp.learning_rate, rng)

    def end_episode(self) -> None:
        for p in self.policies.values():
            p.soft_update(self.hyper.target_update_rate)


class DqnTeam:
    """Independent Q-learners; other vehicles' options are never looked at."""

    kind = "dqn"

    def __init__(self, config: E.EnvConfig, hyper: Hyper, rng: np.random.Generator):
        self.config, self.hyper = config, hyper
        self.streams = None
        self.learners = config.learner_ids
        n = config.n_vehicles
        dim = config.high_obs_dim
        self.agents = {i: DqnAgent(i, dim, hyper.hidden_dim, hyper.discount_factor, 1.0,
                                   hyper.discount_mode, rng) for i in self.learners}
        self.buffers = {i: new_buffer(dim, n - 1, hyper.buffer_capacity) for i in self.learners}
        self.schedule = LinearEpsilon.for_budget(hyper.training_episodes)

    def refresh(self, subjects, highs) -> None:
        pass

    def record(self, subject, option, highs) -> None:
        pass

    def choose(self, vid, obs, mask, rng, greedy, episode) -> OptionId:
        eps = 0.0 if greedy else self.schedule(episode)
        return epsilon_greedy(self.agents[vid], obs.vector, mask, rng, eps)

    def store(self, vid, transition) -> None:
        self.buffers[vid].push(transition.record())

    def learn(self, rng) -> None:
        for i in self.learners:
            if len(self.buffers[i]):
                batch = self.buffers[i].sample(self.hyper.batch_size, rng)
                dqn_update(self.agents[i], batch, self.hyper.learning_rate)

    def end_episode(self) -> None:
        for a in self.agents.values():
            a.soft_update(self.hyper.target_update_rate)


@dataclass
class EpisodeResult:
    steps: int = 0
    rewards: dict[int, list[float]] = field(default_factory=dict)
    collision: bool = False
    merge_attempts: int = 0
    merges: int = 0
    speeds: list[float] = field(default_factory=list)
    options: dict[int, list[int]] = field(default_factory=dict)
    transitions: dict[int, int] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    @property
    def team_rewards(self) -> list[float]:
        ids = sorted(self.rewards)
        if not ids:
            return [0.0] * self.steps
        return [float(np.mean([self.rewards[i][t] for i in ids])) for t in range(self.steps)]

    @property
    def mean_reward(self) -> float:
        team = self.team_rewards
        return float(np.mean(team)) if team else 0.0

    @property
    def mean_speed(self) -> float:
        return float(np.mean(self.speeds)) if self.speeds else 0.0

    @property
    def merge_success(self) -> float:
        return self.merges / self.merge_attempts if self.merge_attempts else 0.0

    @property
    def lane_change_options(self) -> int:
        return sum(o.count(int(OptionId.LANE_CHANGE)) for o in self.options.values())


def skill_command(skills: Mapping, option: OptionId, state: E.EnvState, vid: int) -> tuple[float, float]:
    if option == OptionId.KEEP_LANE:
        return float(state.speed[vid]), float(state.omega[vid])
    obs = E.low_observation(state, vid)
    return low_agent.command_for(option, low_agent.greedy_action(skills[option], obs), obs)


def check_skills(skills: Mapping) -> None:
    missing = [o.name for o in LEARNED_OPTIONS if skills.get(o) is None]
    if missing:
        raise ConfigError(f"missing skill checkpoint(s): {missing}")


def run_episode(config: E.EnvConfig, team, skills: Mapping, seed: int, rng: np.random.Generator,
                train: bool, greedy: bool = False, episode: int = 0, log_rows: bool = False) -> EpisodeResult:
    """Play one episode; with ``train`` the team stores transitions and learns every step."""
    check_skills(skills)
    specs = option_specs(config)
    learners = config.learner_ids
    n = config.n_vehicles
    state, highs, _ = E.reset(config, seed)
    current = {j: OptionId.KEEP_LANE for j in config.scripted_ids}
    team.refresh(config.scripted_ids, highs)
    if train:
        for j in config.scripted_ids:
            team.record(j, OptionId.KEEP_LANE, highs)

    runs: dict[int, OptionExecution] = {}
    starts: dict[int, tuple] = {}
    res = EpisodeResult(rewards={i: [] for i in learners}, options={i: [] for i in learners},
                        transitions={i: 0 for i in learners})
    initiated: set[int] = set()

    def decide(ids, state, highs):
        team.refresh(ids, highs)
        masks = {i: availability_mask(highs[i]) for i in ids}
        chosen = {i: team.choose(i, highs[i], masks[i], rng, greedy, episode) for i in ids}
        for i in ids:
            current[i] = chosen[i]
            runs[i] = OptionExecution(chosen[i], state.step)
            res.options[i].append(int(chosen[i]))
            if train:
                team.record(i, chosen[i], highs)
            if chosen[i] == OptionId.LANE_CHANGE:
                state = E.begin_lane_change(state, i)
                initiated.add(i)
                res.merge_attempts += 1
        for i in ids:
            others = [current[j] for j in range(n) if j != i]
            starts[i] = (highs[i].vector, masks[i], others)
        return state

    state = decide(learners, state, highs)
    while not state.done:
        actions = {i: skill_command(skills, current[i], state, i) for i in learners}
        state, events = E.step(state, actions)
        highs = E.all_high_observations(state)
        res.steps += 1
        ended = []
        for i in learners:
            r = E.high_reward(events, i, config.alpha, config.collision_penalty, config.max_travel)
            res.rewards[i].append(r)
            runs[i].record(r)
            low = E.low_observation(state, i)
            if state.done or terminated(specs[current[i]], low, runs[i].steps_elapsed):
                ended.append(i)
        res.merges += len(events.lane_change_completed)
        res.collision = res.collision or bool(events.crashed_ids)
        res.speeds.extend(float(state.speed[i]) for i in learners)
        if log_rows:
            res.rows.extend(_rows(episode, state, events, current, res, learners, initiated))
        initiated.clear()
        for i in ended:
            obs, mask, others = starts[i]
            run = runs[i]
            res.transitions[i] += 1
            if train:
                team.store(i, HighTransition(
                    obs=obs, own_option=run.option, others_options=others,
                    accumulated_reward=run.accumulated_high_reward, duration=run.steps_elapsed,
                    next_obs=highs[i].vector, terminal=state.done, mask=mask,
                    next_mask=availability_mask(highs[i])))
        if train:
            team.learn(rng)
        if ended and not state.done:
            state = decide(ended, state, highs)
    if train:
        team.end_episode()
    return res


def _rows(episode, state, events, current, res, learners, initiated):
    for v in range(state.x.shape[0]):
        is_learner = v in learners
        yield {
            "episode": episode, "step": state.step, "vehicle": v, "learner": int(is_learner),
            "x": state.x[v], "y": state.y[v], "heading": state.heading[v], "speed": state.speed[v],
            "option": int(current[v]), "reward": res.rewards[v][-1] if is_learner else 0.0,
            "collided": int(v in events.crashed_ids), "merge_start": int(v in initiated),
            "merge_done": int(v in events.lane_change_completed),
            "merge_fail": int(v in events.lane_change_failed),
        }


# ---------------------------------------------------------------------------
# training / evaluation drivers

TEAMS = {"hero": HeroTeam, "dqn": DqnTeam}


def episode_record(index: int, seed: int, res: EpisodeResult) -> dict:
    row = {"episode": index, "seed": seed, "steps": res.steps, "mean_reward": res.mean_reward}
    for i, rs in sorted(res.rewards.items()):
        row[f"reward_agent_{i}"] = float(np.mean(rs)) if rs else 0.0
    row.update(collision=int(res.collision), merge_attempts=res.merge_attempts, merges=res.merges,
               merge_success=res.merge_success, mean_speed=res.mean_speed)
    return row


def run_training(env_config: E.EnvConfig, skills: Mapping, episodes: int, seed: int,
                 hyper: Hyper | None = None, kind: str = "hero", team=None, start: int = 0,
                 callback=None):
    """Train a team for ``episodes`` episodes; returns ``(team, per-episode log rows)``.

    Passing an existing ``team`` together with ``start`` continues a run.
    Environment seeds come from their own stream, so HERO and DQN runs with
    the same seed see the same sequence of initial scenes.
    """
    check_skills(skills)
    hyper = hyper or Hyper()
    if kind not in TEAMS:
        raise ConfigError(f"unknown team kind {kind!r}")
    if team is None:
        team = TEAMS[kind](env_config, hyper, np.random.default_rng([seed, 0]))
    if team.streams is None:
        team.streams = (np.random.default_rng([seed, 1]), np.random.default_rng([seed, 4]))
    env_rng, learn_rng = team.streams
    log = []
    for k in range(start, start + int(episodes)):
        env_seed = int(env_rng.integers(2**31))
        res = run_episode(env_config, team, skills, env_seed, learn_rng, train=True, episode=k)
        log.append(episode_record(k, env_seed, res))
        if callback is not None:
            callback(k, res)
    return team, log


def evaluate(env_config: E.EnvConfig, team, skills: Mapping, episodes: int = 20, seed: int = 0):
    """Greedy rollouts without learning; returns ``(report, trajectory rows, results)``."""
    from hero.metrics import compute_metrics

    env_rng = np.random.default_rng([seed, 2])
    rng = np.random.default_rng([seed, 3])
    rows, results = [], []
    for k in range(episodes):
        res = run_episode(env_config, team, skills, int(env_rng.integers(2**31)), rng, train=False,
                          greedy=True, episode=k, log_rows=True)
        rows.extend(res.rows)
        results.append(res)
    return compute_metrics(rows), rows, results


# ---------------------------------------------------------------------------
# checkpoints

BUNDLE_NAME = "bundle.json"


def _team_networks(team) -> dict[str, tuple]:
    """File stem -> (network, optimizer state or None)."""
    nets = {}
    if team.kind == "hero":
        for i, p in sorted(team.policies.items()):
            nets[f"high_actor_{i}"] = (p.actor, p.actor_opt)
            nets[f"high_critic_{i}"] = (p.critic, p.critic_opt)
            nets[f"high_target_actor_{i}"] = (p.target_actor, None)
            nets[f"high_target_critic_{i}"] = (p.target_critic, None)
            for j, m in sorted(team.banks[i].models.items()):
                nets[f"opponent_{i}_{j}"] = (m.net, m.opt)
    else:
        for i, a in sorted(team.agents.items()):
            nets[f"dqn_q_{i}"] = (a.q_net, a.opt)
            nets[f"dqn_target_{i}"] = (a.target_net, None)
    return nets


def save_team(directory, team, config_digest: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for stem, (net, opt) in _team_networks(team).items():
        files[stem] = f"{stem}.ckpt"
        save_network(directory / files[stem], net, opt, {"kind": team.kind})
    bundle = {"kind": team.kind, "config_digest": config_digest, "files": files}
    path = directory / BUNDLE_NAME
    path.write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    return path


def load_team(directory, env_config: E.EnvConfig, hyper: Hyper, config_digest: str | None = None):
    """Rebuild a team and overwrite its parameters from a bundle."""
    directory = Path(directory)
    path = directory / BUNDLE_NAME
    if not path.exists():
        raise ConfigError(f"no checkpoint bundle at {path}")
    bundle = json.loads(path.read_text())
    if config_digest is not None and bundle["config_digest"] != config_digest:
        raise ConfigError(f"{path} was written for a different configuration")
    team = TEAMS[bundle["kind"]](env_config, hyper, np.random.default_rng(0))
    for stem, (net, opt) in _team_networks(team).items():
        if stem not in bundle["files"]:
            raise ConfigError(f"{path} lacks {stem}")
        loaded, loaded_opt, _ = load_network(directory / bundle["files"][stem])
        if loaded.layer_dims != net.layer_dims:
            raise ConfigError(f"{stem}: shape {loaded.layer_dims} != {net.layer_dims}")
        for dst, src in zip(net.params, loaded.params):
            dst[...] = src
        if opt is not None and loaded_opt is not None:
            for dst, src in zip(opt.m + opt.v, loaded_opt.m + loaded_opt.v):
                dst[...] = src
            opt.step = loaded_opt.step
    return team
