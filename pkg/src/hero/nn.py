"""Small dense-network substrate with a reverse-mode gradient tape.

Every learner in the package (skill actors/critics, high-level actor/critic,
opponent models, the DQN baseline) is an :class:`MlpNetwork`.  Training code
builds its loss on a :class:`Tape`; ``tape.backward`` walks the recorded
nodes in exact reverse creation order, which is a valid reverse topological
order because a node can only depend on nodes created before it.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hero.errors import DimensionError, NonFiniteError, TapeError
from hero.kernels import adam_kernel

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HEADS = ("linear", "softmax", "gaussian")


# ---------------------------------------------------------------------------
# tape


class Node:
    """A value on a tape.  ``grad`` is filled in by :meth:`Tape.backward`."""

    __slots__ = ("tape", "value", "grad", "needs_grad", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Node defer to Node's reflected ops

    def __init__(self, tape: "Tape", value: np.ndarray, needs_grad: bool):
        self.tape = tape
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, needs_grad={self.needs_grad})"


class Tape:
    """Records primitive operations for one reverse pass.

    A tape can be consumed once; calling :meth:`backward` twice raises
    :class:`TapeError`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._params: dict[tuple[int, int], Node] = {}

    def _check_open(self):
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass")

    def constant(self, value) -> Node:
        self._check_open()
        return Node(self, np.asarray(value, dtype=float), False)

    def variable(self, value) -> Node:
        """A leaf that receives a gradient (used for input-gradient checks)."""
        self._check_open()
        node = Node(self, np.array(value, dtype=float), True)
        self.nodes.append(node)
        return node

    def param(self, net: "MlpNetwork", index: int) -> Node:
        key = (id(net), index)
        node = self._params.get(key)
        if node is None:
            self._check_open()
            node = Node(self, net.params[index], True)  # shares storage with the net
            self.nodes.append(node)
            self._params[key] = node
        return node

    def record(self, value, parents: Sequence[Node], backward) -> Node:
        self._check_open()
        needs = any(p.needs_grad for p in parents)
        node = Node(self, value, needs)
        if needs:
            node._backward = (parents, backward)
            self.nodes.append(node)
        return node

    def backward(self, output: Node, output_grad=None) -> None:
        self._check_open()
        if output.tape is not self:
            raise TapeError("output node belongs to a different tape")
        if output_grad is None:
            if output.value.size != 1:
                raise DimensionError("output_grad required for non-scalar output")
            output_grad = np.ones_like(output.value)
        output_grad = np.asarray(output_grad, dtype=float)
        if output_grad.shape != output.value.shape:
            raise DimensionError(
                f"output_grad shape {output_grad.shape} != output shape {output.value.shape}"
            )
        self.consumed = True
        if not output.needs_grad:
            return
        output.grad = output_grad.copy()
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            parents, fn = node._backward
            grads = fn(node.grad)
            for parent, g in zip(parents, grads):
                if g is None or not parent.needs_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=float)
                else:
                    parent.grad = parent.grad + g

    def gradients(self, net: "MlpNetwork") -> list[np.ndarray]:
        """Gradient per parameter of ``net``; zeros for parameters never touched."""
        out = []
        for i, p in enumerate(net.params):
            node = self._params.get((id(net), i))
            if node is None or node.grad is None:
                out.append(np.zeros_like(p))
            else:
                out.append(node.grad)
        return out


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TapeError("operation needs at least one tape node")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av, bv = a.value, b.value
    return tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Node, c: float) -> Node:
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av, bv = a.value, b.value

    def back(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return tape.record(av @ bv, (a, b), back)


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return a.tape.record(y, (a,), lambda g: (g * y,))


def log(a: Node) -> Node:
    x = a.value
    return a.tape.record(np.log(x), (a,), lambda g: (g / x,))


def square(a: Node) -> Node:
    x = a.value
    return a.tape.record(x * x, (a,), lambda g: (2.0 * g * x,))


def softplus(a: Node) -> Node:
    x = a.value
    y = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return a.tape.record(y, (a,), lambda g: (g * sig,))


def clip(a: Node, lo: float, hi: float) -> Node:
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return a.tape.record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def sum_(a: Node, axis=None, keepdims=False) -> Node:
    x = a.value
    y = x.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return a.tape.record(np.asarray(y, dtype=float), (a,), back)


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def log_softmax(a: Node, mask_add: np.ndarray | None = None) -> Node:
    """Row-wise log-softmax; ``mask_add`` is a constant added to the logits."""
    x = a.value if mask_add is None else a.value + mask_add
    y = _log_softmax(x)
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return a.tape.record(y, (a,), back)


def concat(parts: Sequence, axis: int = -1) -> Node:
    tape = _tape_of(*parts)
    nodes = [_as_node(tape, p) for p in parts]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record(np.concatenate([n.value for n in nodes], axis=axis), nodes, back)


def columns(a: Node, start: int, stop: int) -> Node:
    x = a.value

    def back(g):
        full = np.zeros_like(x)
        full[..., start:stop] = g
        return (full,)

    return a.tape.record(x[..., start:stop], (a,), back)


def pick(a: Node, index: np.ndarray) -> Node:
    """``a[i, index[i]]`` for a 2-D node."""
    x = a.value
    rows = np.arange(x.shape[0])

    def back(g):
        full = np.zeros_like(x)
        full[rows, index] = g
        return (full,)

    return a.tape.record(x[rows, index], (a,), back)


def stop_gradient(a: Node) -> Node:
    return a.tape.constant(a.value)


# ---------------------------------------------------------------------------
# plain numpy helpers


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shift = x - x.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def log_softmax_np(x: np.ndarray, mask_add: np.ndarray | None = None) -> np.ndarray:
    if mask_add is not None:
        x = x + mask_add
    return _log_softmax(np.asarray(x, dtype=float))


def softmax_np(x: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# network


class MlpNetwork:
    """Dense tanh network with a linear, softmax or squashed-gaussian head.

    ``params`` holds ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    ``(fan_in, fan_out)``.  The gaussian head splits the last layer into a
    mean half and a log-std half; the log-std is clamped to [-5, 2].
    """

    def __init__(self, layer_dims: Sequence[int], head: str = "linear", rng=None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise DimensionError(f"layer_dims must be >= 2 positive ints, got {layer_dims}")
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if head == "gaussian" and dims[-1] % 2:
            raise DimensionError("gaussian head needs an even output width")
        self.layer_dims = dims
        self.head = head
        rng = np.random.default_rng(rng)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_dim:
            raise DimensionError(
                f"expected input with last dim {self.input_dim}, got shape {x.shape}"
            )
        return x

    def raw(self, x) -> np.ndarray:
        """Pre-head output (logits for softmax, mean|log-std for gaussian)."""
        h = self._check_input(x)
        last = self.n_layers - 1
        for layer in range(self.n_layers):
            h = h @ self.params[2 * layer] + self.params[2 * layer + 1]
            if layer < last:
                h = np.tanh(h)
        return h

    def forward(self, x) -> np.ndarray:
        out = self.raw(x)
        if self.head == "softmax":
            return softmax_np(out)
        if self.head == "gaussian":
            d = self.output_dim // 2
            out = out.copy()
            out[..., d:] = np.clip(out[..., d:], LOG_STD_MIN, LOG_STD_MAX)
        return out

    __call__ = forward

    def raw_tape(self, tape: Tape, x) -> Node:
        if isinstance(x, Node):
            self._check_input(x.value)
            h = x
        else:
            h = tape.constant(self._check_input(x))
        last = self.n_layers - 1
        for layer in range(self.n_layers):
            h = matmul(h, tape.param(self, 2 * layer)) + tape.param(self, 2 * layer + 1)
            if layer < last:
                h = tanh(h)
        return h

    def forward_tape(self, tape: Tape, x) -> Node:
        """Head output on the tape.  For softmax this is the log-probabilities."""
        out = self.raw_tape(tape, x)
        if self.head == "softmax":
            return log_softmax(out)
        if self.head == "gaussian":
            d = self.output_dim // 2
            return concat([columns(out, 0, d), clip(columns(out, d, 2 * d), LOG_STD_MIN, LOG_STD_MAX)])
        return out

    def copy(self) -> "MlpNetwork":
        clone = MlpNetwork.__new__(MlpNetwork)
        clone.layer_dims = list(self.layer_dims)
        clone.head = self.head
        clone.params = [p.copy() for p in self.params]
        return clone

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam, applied in place.  Returns ``(params, state)``.

    Raises :class:`NonFiniteError` without touching anything if any gradient
    entry is NaN/inf.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    bad = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g) or p.shape != state.m[i].shape:
            raise DimensionError(f"parameter {i}: shape {p.shape} vs grad {np.shape(g)}")
        n_bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        if n_bad:
            bad.append((i, n_bad))
    if bad:
        detail = ", ".join(f"param {i}: {n} non-finite" for i, n in bad)
        raise NonFiniteError(f"adam update aborted ({detail})")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.ascontiguousarray(g, dtype=float)
        adam_kernel(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                    float(lr), state.beta1, state.beta2, state.eps, bc1, bc2)
    return params, state


def soft_update(target_params: Sequence[np.ndarray], online_params: Sequence[np.ndarray], tau: float):
    """``target <- tau * online + (1 - tau) * target`` in place."""
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if isinstance(target_params, MlpNetwork):
        target_params = target_params.params
    if isinstance(online_params, MlpNetwork):
        online_params = online_params.params
    if len(target_params) != len(online_params):
        raise DimensionError("target and online parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise DimensionError(f"shape mismatch {t.shape} vs {o.shape}")
        if tau == 1.0:
            t[...] = o
        else:
            t *= 1.0 - tau
            t += tau * o
    return target_params


def sample_categorical(log_probs, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from ``exp(log_probs)`` using one uniform from ``rng``."""
    lp = np.asarray(log_probs, dtype=float)
    if lp.ndim != 1 or lp.size == 0:
        raise DimensionError("log_probs must be a non-empty vector")
    if not np.all(np.isfinite(lp)):
        raise NonFiniteError("non-finite log-probability")
    p = np.exp(lp)
    total = math.fsum(p)
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {total}, not 1")
    u = rng.random() * total
    acc = 0.0
    last = 0
    for i, pi in enumerate(p):
        if pi <= 0.0:
            continue
        last = i
        acc += pi
        if u < acc:
            return i
    return last


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"HEROCKPT"
_VERSION = 1


def save_network(path, net: MlpNetwork, state: AdamState | None = None, meta: dict | None = None) -> None:
    """Binary dump: magic, version, JSON header, then raw little-endian float64 arrays."""
    arrays = list(net.params)
    header = {
        "layer_dims": net.layer_dims,
        "head": net.head,
        "has_optimizer": state is not None,
        "meta": meta or {},
    }
    if state is not None:
        header["optimizer"] = {
            "step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
        }
        arrays += list(state.m) + list(state.v)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_network(path) -> tuple[MlpNetwork, AdamState | None, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<II", data[8:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + n])
    offset = 16 + n
    net = MlpNetwork.__new__(MlpNetwork)
    net.layer_dims = header["layer_dims"]
    net.head = header["head"]
    shapes = []
    for fan_in, fan_out in zip(net.layer_dims[:-1], net.layer_dims[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset += 8 * count
        return arr

    net.params = [take(s) for s in shapes]
    state = None
    if header["has_optimizer"]:
        opt = header["optimizer"]
        m = [take(s) for s in shapes]
        v = [take(s) for s in shapes]
        state = AdamState(m, v, opt["step"], opt["beta1"], opt["beta2"], opt["eps"])
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return net, state, header["meta"]
