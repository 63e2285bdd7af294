"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each :class:`Tensor` produced by an op keeps references to its parents and
a closure mapping the output gradient to parent gradients. Calling
:func:`backward` on a scalar walks the recorded graph once in reverse
topological order. Only what the MLPs, estimators and attacks need is
implemented; everything is dense and 2-D at most.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from namid.errors import DimensionError, DivergenceError, InputError, StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Input constructor: rejects NaN/Inf."""
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError("tensor input contains NaN or Inf")
    return Tensor(arr, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# elementwise unary -------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = np.exp(-np.logaddexp(0.0, -x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


# reductions and shape ----------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """Row gather along axis 0 (repeats allowed)."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def logsumexp(a: Tensor, axis=None) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    weights = shifted / s
    if axis is None:
        out = out.reshape(())
    else:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _make(out, (a,), backward, "logsumexp")


def log_mean_exp(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return sub(logsumexp(a, axis), np.log(count))


# fused losses ------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels != np.round(labels)) or np.any(labels < 0) or np.any(labels >= c):
        raise InputError(f"labels must be integers in [0, {c})")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))

    def backward(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, labels] -= 1.0
        return (g * probs / n,)

    return _make(np.array(loss), (logits,), backward, "softmax_xent")


COSINE_EPS = 1e-12


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two ``[m, k]`` tensors.

    Rows where either norm is below ``COSINE_EPS`` get similarity 0 and no
    gradient.
    """
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"cosine_similarity needs equal 2-D shapes, got {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    valid = (na >= COSINE_EPS) & (nb >= COSINE_EPS)
    na_s = np.where(valid, na, 1.0)
    nb_s = np.where(valid, nb, 1.0)
    dot = (a.data * b.data).sum(axis=1)
    sim = np.where(valid, dot / (na_s * nb_s), 0.0)

    def backward(g):
        g = np.where(valid, g, 0.0)[:, None]
        ga = b.data / (na_s * nb_s)[:, None] - sim[:, None] * a.data / (na_s**2)[:, None]
        gb = a.data / (na_s * nb_s)[:, None] - sim[:, None] * b.data / (nb_s**2)[:, None]
        return (g * ga, g * gb)

    return _make(sim, (a, b), backward, "cosine")


# backward ----------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise StateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise StateError("backward called on a tensor with no recorded graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt``; clears their ``.grad`` first."""
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# models ------------------------------------------------------------------

ACTIVATIONS = ("relu", "linear")


@dataclass
class MLP:
    """Dense layers with per-layer activation tags; parameterizes a classifier."""

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise DimensionError("MLP needs matching, nonempty weight/bias/activation lists")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise DimensionError(f"layer {i}: unknown activation {act!r}")
            if b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i}: input width {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}"
                )

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, final_activation: str = "linear") -> "MLP":
        weights, biases, acts = [], [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True))
            biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
            acts.append("relu" if i < len(sizes) - 2 else final_activation)
        return cls(weights, biases, acts)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x, train: bool = True) -> Tensor:
        """Logits for a ``[batch, in_dim]`` input.

        With ``train=False`` the parameters enter the graph as constants, so
        gradients can still flow to ``x`` (attacks) without touching them.
        """
        x = _as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"input shape {x.shape} does not match first layer ({self.in_dim} features)")
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            if not train:
                w, b = Tensor(w.data), Tensor(b.data)
            h = add(matmul(h, w), b)
            if act == "relu":
                h = relu(h)
        return h

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(x), train=False).data

    def copy(self) -> "MLP":
        return MLP(
            [Tensor(w.data.copy(), w.requires_grad) for w in self.weights],
            [Tensor(b.data.copy(), b.requires_grad) for b in self.biases],
            list(self.activations),
        )

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w.data
            out[f"layer{i}.bias"] = b.data
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], activations: Sequence[str]) -> "MLP":
        weights = [Tensor(state[f"layer{i}.weight"].copy(), True) for i in range(len(activations))]
        biases = [Tensor(state[f"layer{i}.bias"].copy(), True) for i in range(len(activations))]
        return cls(weights, biases, list(activations))


# optimisers --------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise InputError(f"momentum must be in [0, 1), got {self.momentum}")


def _check_finite(grads: Sequence[np.ndarray], names: Sequence[str] | None) -> None:
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"param[{i}]"
            raise DivergenceError(f"non-finite gradient for {name}")


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    names: Sequence[str] | None = None,
) -> Sequence[Tensor]:
    """In-place SGD with classic velocity momentum and coupled weight decay:
    ``v <- mu*v + g + wd*w``; ``w <- w - lr*v``."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    _check_finite(grads, names)
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.velocity[i].shape != p.shape:
            raise DimensionError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        step = g + state.weight_decay * p.data if state.weight_decay else g
        state.velocity[i] = state.momentum * state.velocity[i] + step
        p.data = p.data - state.lr * state.velocity[i]
    return params


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> Sequence[Tensor]:
    _check_finite(grads, None)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1 - state.beta1**state.t
    c2 = 1 - state.beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        p.data = p.data - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return params


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
