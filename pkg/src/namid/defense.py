"""Adversarial training with and without the natural/adversarial MI loss.

Standard AT and the MI-regularized defense share one training loop; the MI
term is only built when estimators are supplied, ``alpha > 0``, at least
one MI component is enabled and the batch has selected samples. Otherwise
the step is exactly a standard AT step, which keeps the two bit-identical
under a shared seed.
"""

from __future__ import annotations

import json
import math
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from namid import autograd as ag
from namid.attacks import AttackSpec, pgd
from namid.autograd import MLP, OptimizerState, Tensor, sgd_step
from namid.config import RunManifest, SeedTree, TrainRunConfig, parse_config, root_seed
from namid.data import (
    Batch,
    DatasetSplit,
    decode_text,
    encode_text,
    load_container,
    read_manifest,
    save_container,
)
from namid.errors import ConfigError, DivergenceError, FormatError, InputError, VersionError
from namid.estimators import Estimator, selection_mask

log = logging.getLogger(__name__)


def cosine_loss(a, b) -> Tensor:
    """``|1 - cos(a, b)|`` per row (or for a single pair of vectors).

    A zero-norm operand gives similarity 0, hence loss 1.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    single = a.data.ndim == 1
    if a.shape != b.shape:
        raise InputError(f"cosine_loss operands differ in shape: {a.shape} vs {b.shape}")
    if a.shape[-1] < 2:
        raise InputError(f"cosine_loss needs vectors of length >= 2, got {a.shape[-1]}")
    if single:
        a, b = ag.reshape(a, (1, -1)), ag.reshape(b, (1, -1))
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if np.any(np.minimum(na, nb) < ag.COSINE_EPS):
        log.warning("cosine_loss: zero-norm operand; similarity defined as 0")
    sim = ag.cosine_similarity(a, b)
    loss = _abs(1.0 - sim)
    return ag.reshape(loss, ()) if single else loss


def _abs(t: Tensor) -> Tensor:
    sign = np.sign(t.data)
    return ag.mul(t, sign)


def mi_loss(
    est_n: Estimator,
    est_a: Estimator,
    batch: Batch,
    nat_logits: Tensor,
    adv_logits: Tensor,
    lam: float,
    drop_natural: bool = False,
    drop_adversarial: bool = False,
) -> Tensor | None:
    """MI loss over the selected samples of a batch; ``None`` means skip.

    ``batch`` and both logit tensors must already be restricted to the
    selected samples. Per sample, each enabled estimator contributes the
    cosine loss between its per-patch score vectors for the adversarial and
    the natural logits; the batch adds
    ``lam * (adv-MI(adversarial) - nat-MI(adversarial))``. Estimator
    parameters enter as constants, so gradients reach only the logits.
    """
    m = len(batch)
    if m == 0 or (drop_natural and drop_adversarial):
        return None
    if nat_logits.shape[0] != m or adv_logits.shape[0] != m:
        raise InputError("logits must be restricted to the selected samples")
    per_sample = None
    lam_term = None
    use_lam = lam > 0 and m >= 2
    for est, pattern, drop, sign in (
        (est_n, batch.natural, drop_natural, -1.0),
        (est_a, batch.noise, drop_adversarial, 1.0),
    ):
        if drop:
            continue
        s_adv = joint_scores(est, pattern, adv_logits)
        s_nat = joint_scores(est, pattern, nat_logits)
        term = cosine_loss(s_adv, s_nat)
        per_sample = term if per_sample is None else per_sample + term
        if use_lam:
            value = sign * est.estimate(pattern, adv_logits, train=False).value
            lam_term = value if lam_term is None else lam_term + value
    loss = ag.mean(per_sample)
    if lam_term is not None:
        loss = loss + lam * lam_term
    return loss


def joint_scores(est: Estimator, patterns: np.ndarray, logits: Tensor) -> Tensor:
    """Positive-pair scores ``[m, P]`` with frozen estimator weights (any ``m >= 1``)."""
    m = len(patterns)
    P = est.patches
    feats = est.encoder.forward(Tensor(est._blocks(np.asarray(patterns, dtype=np.float64))), train=False)
    z = ag.take(logits, np.repeat(np.arange(m), P))
    out = est.squash(est.scorer.forward(ag.concat([feats, z], axis=1), train=False))
    return ag.reshape(out, (m, P))


def total_loss(
    adv_logits: Tensor,
    labels: np.ndarray,
    alpha: float,
    l_mi: Tensor | None,
) -> Tensor:
    """Cross-entropy on all adversarial logits plus ``alpha`` times the MI loss."""
    l_adv = ag.softmax_cross_entropy(adv_logits, labels)
    if l_mi is None or alpha == 0:
        return l_adv
    return l_adv + alpha * l_mi


# training -----------------------------------------------------------------


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm`` (0 = off)."""
    if max_norm <= 0:
        return grads
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not total > max_norm:  # also passes NaN through for sgd_step to report
        return grads
    scale = max_norm / total
    return [g * scale for g in grads]

EPOCH_HEADER = ("epoch", "natural_acc", "adversarial_acc", "loss_adv", "loss_mi", "selected", "mi_batches")


@dataclass
class Checkpoint:
    model: MLP
    optimizer: OptimizerState
    epoch: int
    config: TrainRunConfig
    history: list[list] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_entries(self) -> dict[str, np.ndarray]:
        entries = {f"model.{k}": v for k, v in self.model.state().items()}
        for i, v in enumerate(self.optimizer.velocity):
            entries[f"optim.velocity{i}"] = v
        meta = {
            "activations": self.model.activations,
            "epoch": self.epoch,
            "config_hash": self.config.portable().config_hash(),
            "rng": {"root": root_seed(self.config.seed), "next_epoch": self.epoch},
        }
        entries["checkpoint.meta"] = encode_text(json.dumps(meta, sort_keys=True))
        entries["checkpoint.config"] = encode_text(self.config.portable().to_text())
        entries["checkpoint.history"] = np.array(
            [[float(v) for v in row] for row in self.history], dtype=np.float64
        ).reshape(len(self.history), len(EPOCH_HEADER))
        entries["checkpoint.step_losses"] = np.array(self.step_losses, dtype=np.float64)
        return entries

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "Checkpoint":
        if "checkpoint.meta" not in entries:
            raise FormatError("container has no 'checkpoint.meta' entry; not a model checkpoint")
        meta = json.loads(decode_text(entries["checkpoint.meta"]))
        config = parse_config(decode_text(entries["checkpoint.config"]))
        if config.config_hash() != meta["config_hash"]:
            raise VersionError("checkpoint config does not match its recorded hash")
        model_state = {k[len("model."):]: v for k, v in entries.items() if k.startswith("model.")}
        model = MLP.from_state(model_state, meta["activations"])
        velocity = [entries[f"optim.velocity{i}"].copy() for i in range(len(model.parameters()))
                    if f"optim.velocity{i}" in entries]
        opt = OptimizerState(config.lr, config.momentum, config.weight_decay, velocity)
        hist = entries["checkpoint.history"]
        history = [[int(r[0]), *map(float, r[1:5]), int(r[5]), int(r[6])] for r in hist]
        return cls(model, opt, meta["epoch"], config, history, list(entries["checkpoint.step_losses"]))


def save_checkpoint(path, ckpt: Checkpoint, manifest: RunManifest | None = None) -> None:
    manifest = manifest or RunManifest(config=ckpt.config.portable().to_text(),
                                       seed=root_seed(ckpt.config.seed))
    save_container(path, ckpt.to_entries(), manifest)


def load_checkpoint(path) -> Checkpoint:
    entries = load_container(path)
    manifest = read_manifest(entries)
    ckpt = Checkpoint.from_entries(entries)
    if manifest is not None and manifest.config and manifest.config != ckpt.config.to_text():
        raise VersionError(f"{os.fspath(path)}: checkpoint config differs from its manifest")
    return ckpt


def load_model(path) -> MLP:
    return load_checkpoint(path).model


def train_attack_spec(config: TrainRunConfig) -> AttackSpec:
    return AttackSpec(
        norm=config.norm,
        eps=config.eps,
        steps=config.train_steps,
        step_size=config.attack_step,
        random_start=config.random_start,
    )


def init_model(config: TrainRunConfig, dim: int, classes: int) -> MLP:
    tree = SeedTree(root_seed(config.seed))
    return MLP.init([dim, *config.hidden, classes], tree.rng("model/init"))


def _mi_active(config: TrainRunConfig, estimators) -> bool:
    return (
        estimators is not None
        and config.alpha > 0
        and not (config.drop_natural_mi and config.drop_adversarial_mi)
    )


def train(
    config: TrainRunConfig,
    data: DatasetSplit,
    estimators: tuple[Estimator, Estimator] | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
) -> Checkpoint:
    """Mini-batch adversarial training; the MI loss is added when estimators are given.

    Each batch draws fresh PGD examples against the current parameters.
    Shuffling and attack random starts are derived from
    ``(root seed, epoch, batch)``, so resuming from a checkpoint at epoch
    ``k`` continues exactly as an uninterrupted run.
    """
    tree = SeedTree(root_seed(config.seed))
    classes = max(data.num_classes, 2)
    if resume is None:
        model = init_model(config, data.dim, classes)
        opt = OptimizerState(config.lr, config.momentum, config.weight_decay)
        ckpt = Checkpoint(model, opt, 0, config)
    else:
        ckpt = resume
        ckpt.config = config
    model, opt = ckpt.model, ckpt.optimizer
    params = model.parameters()
    names = [f"layer{i // 2}.{'weight' if i % 2 == 0 else 'bias'}" for i in range(len(params))]
    spec = train_attack_spec(config)
    use_mi = _mi_active(config, estimators)
    lam = config.effective_lambda

    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(ckpt.epoch, last):
        order = tree.rng(f"train/epoch/{epoch}").permutation(data.n)
        totals = np.zeros(4)  # nat correct, adv correct, sum l_adv, sum l_mi
        selected = mi_batches = batches = 0
        for b, start in enumerate(range(0, data.n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            x, y = data.inputs[idx], data.labels[idx]
            batch = pgd(model, x, y, spec, rng=tree.rng(f"train/attack/{epoch}/{b}"))
            adv_logits = model.forward(Tensor(batch.adversarial))
            nat_pred = np.argmax(model.predict(x), axis=1)

            l_mi = None
            if use_mi:
                nat_logits = model.forward(Tensor(batch.natural))
                sel = np.flatnonzero(selection_mask(nat_logits.data, adv_logits.data, y))
                selected += len(sel)
                l_mi = mi_loss(
                    estimators[0], estimators[1], batch.subset(sel),
                    ag.take(nat_logits, sel), ag.take(adv_logits, sel), lam,
                    config.drop_natural_mi, config.drop_adversarial_mi,
                )
            loss = total_loss(adv_logits, y, config.alpha, l_mi)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            sgd_step(params, clip_grad_norm(ag.grad(loss, params), config.grad_clip), opt, names)

            l_adv = loss.item() if l_mi is None else ag.softmax_cross_entropy(Tensor(adv_logits.data), y).item()
            ckpt.step_losses.append(loss.item())
            totals += (
                (nat_pred == y).sum(),
                (np.argmax(adv_logits.data, axis=1) == y).sum(),
                l_adv * len(idx),
                0.0 if l_mi is None else l_mi.item(),
            )
            mi_batches += l_mi is not None
            batches += 1
        ckpt.history.append([
            epoch,
            100.0 * totals[0] / data.n,
            100.0 * totals[1] / data.n,
            totals[2] / data.n,
            totals[3] / max(mi_batches, 1),
            selected,
            mi_batches,
        ])
        ckpt.epoch = epoch + 1
        log.info("epoch %d: %s", epoch, ckpt.history[-1])
    return ckpt


def train_standard_at(config: TrainRunConfig, data: DatasetSplit, **kw) -> Checkpoint:
    return train(config, data, None, **kw)


def train_namid(
    config: TrainRunConfig,
    data: DatasetSplit,
    estimators: tuple[Estimator, Estimator] | None = None,
    **kw,
) -> Checkpoint:
    """Train with the MI loss; estimators come from the argument or the config paths."""
    if estimators is None:
        estimators = load_estimator_pair(config)
    return train(config, data, estimators, **kw)


def load_estimator_pair(config: TrainRunConfig) -> tuple[Estimator, Estimator]:
    paths = (config.estimator_natural, config.estimator_adversarial)
    if not all(paths):
        raise ConfigError("estimator_natural and estimator_adversarial must name estimator checkpoints")
    for key, p in zip(("estimator_natural", "estimator_adversarial"), paths):
        if not os.path.exists(p):
            raise ConfigError(f"{key}: checkpoint {p!r} does not exist")
    est_n = Estimator.from_entries(load_container(paths[0]))
    est_a = Estimator.from_entries(load_container(paths[1]))
    if est_n.kind != "natural" or est_a.kind != "adversarial":
        raise ConfigError(f"estimator kinds are {est_n.kind!r}/{est_a.kind!r}; expected natural/adversarial")
    return est_n, est_a
