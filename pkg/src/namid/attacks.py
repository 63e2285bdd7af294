"""FGSM and PGD under L-inf and L2 budgets for inputs in [0, 1].

Every attack funnels its candidate perturbation through :func:`_settle`,
which clips into the data domain and guarantees, in floating point, that
``natural + noise`` lies in [0, 1] and that no coordinate of the emitted
noise exceeds the requested step in magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from namid.autograd import MLP, Tensor, backward, enable_grad, softmax_cross_entropy
from namid.config import DEFAULT_EPS, NORMS, SeedTree
from namid.data import Batch
from namid.errors import DivergenceError, InputError


@dataclass(frozen=True)
class AttackSpec:
    norm: str = "linf"
    eps: float = DEFAULT_EPS["linf"]
    steps: int = 10
    step_size: float | None = None
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise InputError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.eps < 0:
            raise InputError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise InputError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and (self.step_size < 0 or (self.step_size == 0 and self.eps > 0)):
            raise InputError(f"step size must be > 0, got {self.step_size}")

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.eps / 4

    @property
    def name(self) -> str:
        return f"PGD-{self.steps}"


def _row_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a * a).sum(axis=-1, keepdims=True))


def project(delta: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Project each row of ``delta`` onto the attack's eps-ball."""
    delta = np.asarray(delta, dtype=np.float64)
    if spec.norm == "linf":
        return np.clip(delta, -spec.eps, spec.eps)
    norms = _row_norms(delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(norms > spec.eps, spec.eps / norms, 1.0)
    return delta * factor


def _settle(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Noise ``n`` with ``x + n`` in [0, 1] and ``|n_j| <= |delta_j|``."""
    bound = np.abs(delta)
    adv = np.clip(x + delta, 0.0, 1.0)
    noise = np.clip(adv - x, -bound, bound)
    for _ in range(64):
        adv = x + noise
        high, low = adv > 1.0, adv < 0.0
        if not (high.any() or low.any()):
            return noise
        noise = np.where(high, np.nextafter(noise, -np.inf), noise)
        noise = np.where(low, np.nextafter(noise, np.inf), noise)
    raise DivergenceError("could not settle adversarial example inside [0, 1]")


def input_gradient(model: MLP, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of mean cross-entropy w.r.t. the input, with the loss value."""
    with enable_grad():
        xt = Tensor(x, requires_grad=True)
        loss = softmax_cross_entropy(model.forward(xt, train=False), y)
    if not np.isfinite(loss.data):
        raise DivergenceError("non-finite loss during attack ascent")
    backward(loss)
    return xt.grad, loss.item()


def fgsm(model: MLP, x: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    """``clip(x + eps * sign(grad), 0, 1)``; ``sign(0) = 0``."""
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    g, _ = input_gradient(model, x, y)
    return x + _settle(x, eps * np.sign(g))


def _random_start(x: np.ndarray, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.norm == "linf":
        delta = rng.uniform(-spec.eps, spec.eps, size=x.shape)
    else:
        direction = rng.standard_normal(x.shape)
        direction /= np.maximum(_row_norms(direction), 1e-300)
        radius = spec.eps * rng.uniform(0.0, 1.0, size=(len(x), 1)) ** (1.0 / x.shape[1])
        delta = project(direction * radius, spec)
    return _settle(x, delta)


def pgd(
    model: MLP,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
    trace: list[float] | None = None,
) -> Batch:
    """Projected gradient ascent on cross-entropy of the true label.

    ``trace``, when given, receives the loss before each step and after the
    last one.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if spec.eps == 0:
        return Batch(x.copy(), np.zeros_like(x), y.copy())
    if spec.random_start:
        rng = rng if rng is not None else SeedTree(spec.seed).rng("pgd/start")
        noise = _random_start(x, spec, rng)
    else:
        noise = np.zeros_like(x)
    step = min(spec.step, spec.eps)
    for _ in range(spec.steps):
        g, loss = input_gradient(model, x + noise, y)
        if trace is not None:
            trace.append(loss)
        if spec.norm == "linf":
            delta = noise + step * np.sign(g)
        else:
            norms = _row_norms(g)
            with np.errstate(divide="ignore", invalid="ignore"):
                unit = np.where(norms > 0, g / norms, 0.0)
            delta = noise + step * unit
        noise = _settle(x, project(delta, spec))
    if trace is not None:
        _, loss = input_gradient(model, x + noise, y)
        trace.append(loss)
    return Batch(x.copy(), noise, y.copy())


def check_constraints(batch: Batch, spec: AttackSpec, rel_tol: float = 1e-9) -> None:
    """Raise if any emitted example breaks the budget or leaves [0, 1]."""
    adv = batch.adversarial
    if adv.min() < 0 or adv.max() > 1:
        raise InputError("adversarial example outside [0, 1]")
    if spec.norm == "linf":
        if np.abs(batch.noise).max(initial=0.0) > spec.eps:
            raise InputError("L-inf budget exceeded")
    elif _row_norms(batch.noise).max(initial=0.0) > spec.eps * (1 + rel_tol):
        raise InputError("L2 budget exceeded")
