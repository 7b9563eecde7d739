"""Opponent models: per (owner, subject) classifiers over the subject's options.

Each owner keeps one softmax network per other vehicle.  The network reads
the owner's own high-level observation and is trained on the options the
subject was seen to pick, with an entropy bonus against over-fitting::

    loss = -mean log p(o_subject | s_owner) - lambda * mean H(p(. | s_owner))
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from hero import nn
from hero.errors import ConfigError, NonFiniteError
from hero.nn import AdamState, MlpNetwork, Tape, adam_step
from hero.options import N_OPTIONS, OptionId
from hero.replay import ArrayBuffer

DEFAULT_ENTROPY_WEIGHT = 0.01


def _obs_vector(obs) -> np.ndarray:
    vec = getattr(obs, "vector", None)
    return np.asarray(obs if vec is None else vec, dtype=float)


@dataclass
class OpponentObservation:
    obs: np.ndarray
    subject_option: OptionId


class OpponentNet:
    def __init__(self, owner: int, subject: int, obs_dim: int, hidden: int = 32,
                 entropy_weight: float = DEFAULT_ENTROPY_WEIGHT, rng=None):
        if owner == subject:
            raise ConfigError("an agent does not model itself")
        if entropy_weight < 0:
            raise ValueError("entropy weight must be >= 0")
        self.owner, self.subject = int(owner), int(subject)
        self.entropy_weight = float(entropy_weight)
        self.net = MlpNetwork([obs_dim, hidden, hidden, N_OPTIONS], "softmax", np.random.default_rng(rng))
        self.opt = AdamState.for_params(self.net.params)

    @property
    def obs_dim(self) -> int:
        return self.net.input_dim


def predict(model: OpponentNet, obs) -> np.ndarray:
    """Log-probabilities over the subject's options (batched if ``obs`` is 2-D)."""
    logits = model.net.raw(_obs_vector(obs))
    return nn.log_softmax_np(logits)


def loss_terms(model: OpponentNet, obs: np.ndarray, targets: np.ndarray, tape: Tape):
    """Tape node of the regularized loss on a batch of (observation, option)."""
    logp = model.net.forward_tape(tape, obs)
    ce = -nn.mean(nn.pick(logp, targets))
    entropy = -nn.mean(nn.sum_(nn.exp(logp) * logp, axis=1))
    return ce - nn.scale(entropy, model.entropy_weight)


def _as_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, Mapping):
        return np.asarray(batch["obs"], dtype=float), np.asarray(batch["option"], dtype=np.int64)
    batch = list(batch)
    if not batch:
        raise ValueError("empty opponent batch")
    obs = np.stack([_obs_vector(b.obs) for b in batch])
    return obs, np.array([int(b.subject_option) for b in batch], dtype=np.int64)


def update(model: OpponentNet, batch, lr: float) -> float:
    """One Adam step on the regularized cross-entropy; returns the pre-step loss."""
    obs, targets = _as_arrays(batch)
    if obs.shape[0] == 0:
        raise ValueError("empty opponent batch")
    tape = Tape()
    loss = loss_terms(model, obs, targets, tape)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NonFiniteError(f"opponent model {model.owner}->{model.subject}: loss is {value}")
    tape.backward(loss)
    adam_step(model.net.params, tape.gradients(model.net), model.opt, lr)
    return value


def infer_all(models: Mapping[int, OpponentNet], obs, subjects: Iterable[int] | None = None) -> np.ndarray:
    """Concatenated log-probabilities, one block of four per subject in id order."""
    ids = sorted(models) if subjects is None else sorted(subjects)
    missing = [j for j in ids if j not in models]
    if missing:
        raise ConfigError(f"no opponent model for vehicle(s) {missing}")
    x = _obs_vector(obs)
    if not ids:
        return np.zeros(x.shape[:-1] + (0,))
    return np.concatenate([predict(models[j], x) for j in ids], axis=-1)


class OpponentBank:
    """All of one owner's models plus their observation buffers."""

    def __init__(self, owner: int, subjects: Sequence[int], obs_dim: int, hidden: int = 32,
                 entropy_weight: float = DEFAULT_ENTROPY_WEIGHT, capacity: int = 100_000, rng=None):
        rng = np.random.default_rng(rng)
        self.owner = int(owner)
        self.subjects = sorted(int(j) for j in subjects)
        self.models = {j: OpponentNet(owner, j, obs_dim, hidden, entropy_weight, rng) for j in self.subjects}
        self.buffers = {j: ArrayBuffer({"obs": ((obs_dim,), float), "option": ((), np.int64)}, capacity)
                        for j in self.subjects}
        # latest prediction per subject, refreshed only when that subject re-decides
        self.held = {j: np.full(N_OPTIONS, -np.log(N_OPTIONS)) for j in self.subjects}

    def observe(self, subject: int, obs, option: OptionId) -> None:
        self.buffers[subject].push({"obs": _obs_vector(obs), "option": int(option)})

    def refresh(self, subject: int, obs) -> None:
        self.held[subject] = predict(self.models[subject], obs)

    def held_features(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros(0)
        return np.concatenate([self.held[j] for j in self.subjects])

    def features(self, obs) -> np.ndarray:
        return infer_all(self.models, obs, self.subjects)

    def train_step(self, batch_size: int, lr: float, rng: np.random.Generator) -> dict[int, float]:
        losses = {}
        for j in self.subjects:
            if len(self.buffers[j]):
                losses[j] = update(self.models[j], self.buffers[j].sample(batch_size, rng), lr)
        return losses
