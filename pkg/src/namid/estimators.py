"""Local-feature MI estimators for natural and adversarial MI.

An estimator splits a pattern (the natural input ``x`` for natural MI, the
noise ``n`` for adversarial MI) into ``P`` contiguous blocks, encodes each
block with a shared 2-layer MLP, and scores every (block feature, logits)
pair with a second MLP. Positive pairs match pattern ``i`` with logits
``i``; negatives pair pattern ``(i + 1) mod m`` with logits ``i``. The
Donsker-Varadhan bound is taken per block and averaged over blocks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from namid import autograd as ag
from namid.autograd import MLP, AdamState, Tensor, adam_step, no_grad
from namid.config import SeedTree, TrainRunConfig
from namid.data import DatasetSplit, decode_text, encode_text
from namid.errors import BatchTooSmallError, EmptySelectionError, FormatError, InputError

KINDS = ("natural", "adversarial")
BOUNDS = ("dv", "jsd")


def dv_bound(scores_joint, scores_marginal) -> Tensor:
    """``mean(joint) - log mean(exp(marginal))`` with a max-shifted log-mean-exp."""
    joint = scores_joint if isinstance(scores_joint, Tensor) else Tensor(scores_joint)
    marg = scores_marginal if isinstance(scores_marginal, Tensor) else Tensor(scores_marginal)
    if joint.size == 0 or marg.size == 0:
        raise InputError("dv_bound needs at least one joint and one marginal score")
    return ag.mean(joint) - ag.log_mean_exp(marg)


def jsd_bound(scores_joint, scores_marginal) -> Tensor:
    joint = scores_joint if isinstance(scores_joint, Tensor) else Tensor(scores_joint)
    marg = scores_marginal if isinstance(scores_marginal, Tensor) else Tensor(scores_marginal)
    if joint.size == 0 or marg.size == 0:
        raise InputError("jsd_bound needs at least one joint and one marginal score")
    return -ag.mean(ag.softplus(-joint)) - ag.mean(ag.softplus(marg))


@dataclass
class MIEstimate:
    value: Tensor  # scalar, mean of per-patch bounds
    patch_bounds: Tensor  # [P]
    joint_scores: Tensor  # [m, P], positive-pair scores per sample
    marginal_scores: Tensor  # [m, P]
    bound: str = "dv"

    @property
    def scalar(self) -> float:
        return self.value.item()

    def per_sample(self) -> np.ndarray:
        """Per-sample contributions whose batch mean equals ``value``."""
        pos = self.joint_scores.data
        if self.bound == "jsd":
            pos = -np.logaddexp(0.0, -pos)
        # patch bound = mean_i pos[i, p] - c_p, so c_p is the marginal term
        c = pos.mean(axis=0) - self.patch_bounds.data
        return (pos - c).mean(axis=1)


@dataclass
class Estimator:
    kind: str
    encoder: MLP
    scorer: MLP
    patches: int
    pattern_dim: int
    num_classes: int
    bound: str = "dv"
    score_clip: float = 0.0  # scores squashed to c*tanh(s/c) when c > 0

    def __post_init__(self):
        if self.score_clip < 0:
            raise InputError(f"score_clip must be >= 0, got {self.score_clip}")
        if self.kind not in KINDS:
            raise InputError(f"estimator kind must be one of {KINDS}, got {self.kind!r}")
        if self.bound not in BOUNDS:
            raise InputError(f"bound must be one of {BOUNDS}, got {self.bound!r}")
        if self.patches < 1:
            raise InputError("patches must be >= 1")
        if self.encoder.in_dim != self.block_size:
            raise InputError(f"encoder input {self.encoder.in_dim} != block size {self.block_size}")
        if self.scorer.in_dim != self.encoder.out_dim + self.num_classes:
            raise InputError(
                f"scorer input {self.scorer.in_dim} != feature {self.encoder.out_dim} + classes {self.num_classes}"
            )

    @classmethod
    def init(
        cls,
        kind: str,
        pattern_dim: int,
        num_classes: int,
        rng: np.random.Generator,
        patches: int = 4,
        feat: int = 16,
        hidden: int = 32,
        bound: str = "dv",
        score_clip: float = 0.0,
    ) -> "Estimator":
        block = math.ceil(pattern_dim / patches)
        encoder = MLP.init([block, hidden, feat], rng)
        scorer = MLP.init([feat + num_classes, hidden, 1], rng)
        return cls(kind, encoder, scorer, patches, pattern_dim, num_classes, bound, score_clip)

    def squash(self, raw: Tensor) -> Tensor:
        if not self.score_clip:
            return raw
        c = self.score_clip
        return ag.tanh(raw * (1.0 / c)) * c

    @property
    def block_size(self) -> int:
        return math.ceil(self.pattern_dim / self.patches)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.scorer.parameters()

    def _blocks(self, patterns: np.ndarray) -> np.ndarray:
        m, d = patterns.shape
        if d != self.pattern_dim:
            raise InputError(f"pattern width {d} != estimator pattern dim {self.pattern_dim}")
        padded = np.zeros((m, self.patches * self.block_size))
        padded[:, :d] = patterns
        return padded.reshape(m * self.patches, self.block_size)

    def scores(self, patterns: np.ndarray, logits: Tensor, train: bool = True) -> tuple[Tensor, Tensor]:
        """Positive and negative scores, each ``[m, P]``."""
        patterns = np.asarray(patterns, dtype=np.float64)
        logits = logits if isinstance(logits, Tensor) else Tensor(logits)
        m = len(patterns)
        if m < 2:
            raise BatchTooSmallError(f"estimation needs at least 2 samples for negatives, got {m}")
        if logits.shape != (m, self.num_classes):
            raise InputError(f"logits shape {logits.shape} != ({m}, {self.num_classes})")
        P = self.patches
        feats = self.encoder.forward(Tensor(self._blocks(patterns)), train=train)
        rows = np.repeat(np.arange(m), P)
        z = ag.take(logits, rows)
        shifted = ((np.arange(m) + 1) % m)[:, None] * P + np.arange(P)[None, :]
        feats_neg = ag.take(feats, shifted.ravel())
        both = ag.concat([ag.concat([feats, z], axis=1), ag.concat([feats_neg, z], axis=1)], axis=0)
        out = self.squash(self.scorer.forward(both, train=train))
        pos = ag.reshape(ag.take(out, np.arange(m * P)), (m, P))
        neg = ag.reshape(ag.take(out, np.arange(m * P, 2 * m * P)), (m, P))
        return pos, neg

    def estimate(self, patterns: np.ndarray, logits, train: bool = False) -> MIEstimate:
        pos, neg = self.scores(patterns, logits, train=train)
        return estimate_from_scores(pos, neg, self.bound)

    def copy(self) -> "Estimator":
        return Estimator(
            self.kind, self.encoder.copy(), self.scorer.copy(), self.patches,
            self.pattern_dim, self.num_classes, self.bound, self.score_clip,
        )

    # persistence
    def to_entries(self) -> dict[str, np.ndarray]:
        meta = {
            "kind": self.kind, "bound": self.bound, "patches": self.patches,
            "pattern_dim": self.pattern_dim, "num_classes": self.num_classes, "score_clip": self.score_clip,
            "encoder_act": self.encoder.activations, "scorer_act": self.scorer.activations,
        }
        entries = {"estimator.meta": encode_text(json.dumps(meta, sort_keys=True))}
        entries.update({f"encoder.{k}": v for k, v in self.encoder.state().items()})
        entries.update({f"scorer.{k}": v for k, v in self.scorer.state().items()})
        return entries

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "Estimator":
        if "estimator.meta" not in entries:
            raise FormatError("container has no 'estimator.meta' entry; not an estimator checkpoint")
        meta = json.loads(decode_text(entries["estimator.meta"]))
        enc = {k[len("encoder."):]: v for k, v in entries.items() if k.startswith("encoder.")}
        sco = {k[len("scorer."):]: v for k, v in entries.items() if k.startswith("scorer.")}
        return cls(
            meta["kind"],
            MLP.from_state(enc, meta["encoder_act"]),
            MLP.from_state(sco, meta["scorer_act"]),
            meta["patches"], meta["pattern_dim"], meta["num_classes"], meta["bound"],
            meta.get("score_clip", 0.0),
        )


def estimate_from_scores(pos: Tensor, neg: Tensor, bound: str = "dv") -> MIEstimate:
    P = pos.shape[1]
    if bound == "dv":
        patch = ag.mean(pos, axis=0) - ag.log_mean_exp(neg, axis=0)
    else:
        patch = -ag.mean(ag.softplus(-pos), axis=0) - ag.mean(ag.softplus(neg), axis=0)
    value = ag.mean(patch)
    assert patch.shape == (P,)
    return MIEstimate(value, patch, pos, neg, bound)


def estimate(est: Estimator, patterns: np.ndarray, logits) -> MIEstimate:
    return est.estimate(patterns, logits)


# training -----------------------------------------------------------------


@dataclass
class _EMA:
    """Log-domain moving average of ``mean(exp(marginal scores))`` per patch."""

    decay: float
    log_value: np.ndarray | None = None

    def update(self, lme: np.ndarray) -> np.ndarray:
        if self.log_value is None:
            self.log_value = lme.copy()
        else:
            self.log_value = np.logaddexp(
                np.log(self.decay) + self.log_value, np.log1p(-self.decay) + lme
            )
        return self.log_value


def _bound_objective(pos: Tensor, neg: Tensor, bound: str, ema: _EMA | None) -> Tensor:
    """Differentiable surrogate whose gradient is the (bias-corrected) bound gradient."""
    if bound == "jsd":
        return ag.mean(-ag.mean(ag.softplus(-pos), axis=0) - ag.mean(ag.softplus(neg), axis=0))
    if ema is None:
        return ag.mean(ag.mean(pos, axis=0) - ag.log_mean_exp(neg, axis=0))
    lme = ag.log_mean_exp(Tensor(neg.data), axis=0).data
    log_avg = ema.update(lme)
    # d/dθ of mean(exp(neg - log_avg)) = mean(exp(neg) dneg) / avg
    marg = ag.mean(ag.exp(neg - log_avg), axis=0)
    return ag.mean(ag.mean(pos, axis=0) - marg)


def selection_mask(nat_logits: np.ndarray, adv_logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Correct on the natural input and wrong on its adversarial counterpart.

    ``argmax`` resolves ties to the lowest index.
    """
    labels = np.asarray(labels)
    return (np.argmax(nat_logits, axis=1) == labels) & (np.argmax(adv_logits, axis=1) != labels)


def select_training_pairs(model: MLP, batch) -> np.ndarray:
    """Indices of samples kept by the natural-correct / adversarial-wrong rule."""
    nat = model.predict(batch.natural)
    adv = model.predict(batch.adversarial)
    return np.flatnonzero(selection_mask(nat, adv, batch.labels))


@dataclass
class EstimatorHistory:
    rows: list[list] = field(default_factory=list)
    header: tuple[str, ...] = (
        "epoch", "mode", "selected", "batches_used",
        "nat_mi_natural", "nat_mi_adversarial", "nat_gap",
        "adv_mi_adversarial", "adv_mi_natural", "adv_gap",
    )


def estimator_pairs(est: Estimator, natural: np.ndarray, noise: np.ndarray):
    """Pattern fed to ``est``: natural inputs for natural MI, noise otherwise."""
    return natural if est.kind == "natural" else noise


def mi_terms(
    est_n: Estimator,
    est_a: Estimator,
    natural: np.ndarray,
    noise: np.ndarray,
    nat_logits,
    adv_logits,
    train: bool = False,
) -> dict[str, MIEstimate]:
    """The four estimates used throughout: each estimator on natural and adversarial logits."""
    return {
        "n_nat": est_n.estimate(natural, nat_logits, train),
        "n_adv": est_n.estimate(natural, adv_logits, train),
        "a_adv": est_a.estimate(noise, adv_logits, train),
        "a_nat": est_a.estimate(noise, nat_logits, train),
    }


def train_estimators(
    model: MLP,
    data: DatasetSplit,
    attack,
    config: TrainRunConfig,
    mode: str | None = None,
    seed_tree: SeedTree | None = None,
    history: EstimatorHistory | None = None,
) -> tuple[Estimator, Estimator]:
    """Fit natural- and adversarial-MI estimators against a frozen model.

    ``mode="eq5"`` maximizes the natural/adversarial gap of each estimator;
    ``mode="eq4"`` maximizes each estimator's own MI only. Both train on the
    selected pairs of every mini-batch.
    """
    from namid.attacks import pgd

    mode = mode or config.est_mode
    if mode not in ("eq4", "eq5"):
        raise InputError(f"mode must be eq4 or eq5, got {mode!r}")
    tree = seed_tree or SeedTree(config.seed)
    classes = model.out_dim
    init_rng = tree.rng("estimators/init")
    kw = dict(patches=config.est_patches, feat=config.est_feat, hidden=config.est_hidden, bound=config.est_bound,
              score_clip=config.est_score_clip)
    est_n = Estimator.init("natural", data.dim, classes, init_rng, **kw)
    est_a = Estimator.init("adversarial", data.dim, classes, init_rng, **kw)

    # the target model is frozen, so its adversarial examples and logits are fixed
    batch = pgd(model, data.inputs, data.labels, attack, rng=tree.rng("estimators/attack"))
    nat_logits = model.predict(batch.natural)
    adv_logits = model.predict(batch.adversarial)
    keep = selection_mask(nat_logits, adv_logits, batch.labels)

    opt_n, opt_a = AdamState(config.est_lr), AdamState(config.est_lr)
    use_ema = config.est_bound == "dv"
    emas = {k: _EMA(config.ema_decay) if use_ema else None for k in ("n_nat", "n_adv", "a_adv", "a_nat")}

    for epoch in range(config.est_epochs):
        order = tree.rng(f"estimators/epoch/{epoch}").permutation(data.n)
        used = 0
        for start in range(0, data.n, config.est_batch):
            idx = order[start : start + config.est_batch]
            idx = idx[keep[idx]]
            if len(idx) < 2:
                continue
            used += 1
            x, n = batch.natural[idx], batch.noise[idx]
            zn, za = Tensor(nat_logits[idx]), Tensor(adv_logits[idx])

            pos, neg = est_n.scores(x, zn)
            obj_n = _bound_objective(pos, neg, config.est_bound, emas["n_nat"])
            if mode == "eq5":
                pos, neg = est_n.scores(x, za)
                obj_n = obj_n - _bound_objective(pos, neg, config.est_bound, emas["n_adv"])
            params = est_n.parameters()
            adam_step(params, [-g for g in ag.grad(obj_n, params)], opt_n)

            pos, neg = est_a.scores(n, za)
            obj_a = _bound_objective(pos, neg, config.est_bound, emas["a_adv"])
            if mode == "eq5":
                pos, neg = est_a.scores(n, zn)
                obj_a = obj_a - _bound_objective(pos, neg, config.est_bound, emas["a_nat"])
            params = est_a.parameters()
            adam_step(params, [-g for g in ag.grad(obj_a, params)], opt_a)

        if used == 0:
            raise EmptySelectionError(
                f"epoch {epoch}: no mini-batch had 2+ samples that are correct naturally and wrong "
                f"adversarially ({int(keep.sum())} of {data.n} overall); the model is too weak or too robust"
            )
        if history is not None:
            sel = np.flatnonzero(keep)
            with no_grad():
                t = mi_terms(est_n, est_a, batch.natural[sel], batch.noise[sel], nat_logits[sel], adv_logits[sel])
            history.rows.append([
                epoch, mode, len(sel), used,
                t["n_nat"].scalar, t["n_adv"].scalar, t["n_nat"].scalar - t["n_adv"].scalar,
                t["a_adv"].scalar, t["a_nat"].scalar, t["a_adv"].scalar - t["a_nat"].scalar,
            ])
    return est_n, est_a


def train_mi_maximizer(
    model: MLP,
    data: DatasetSplit,
    config: TrainRunConfig,
    seed_tree: SeedTree | None = None,
) -> Estimator:
    """Fit one estimator of I(X; h(X)) on natural inputs by plain bound maximization.

    No attack and no selection: this is the standard-MI estimator probed by
    the proof-of-concept harness.
    """
    tree = seed_tree or SeedTree(config.seed)
    est = Estimator.init(
        "natural", data.dim, model.out_dim, tree.rng("mi_max/init"),
        patches=config.est_patches, feat=config.est_feat, hidden=config.est_hidden,
        bound=config.est_bound, score_clip=config.est_score_clip,
    )
    logits = model.predict(data.inputs)
    opt = AdamState(config.est_lr)
    ema = _EMA(config.ema_decay) if config.est_bound == "dv" else None
    params = est.parameters()
    for epoch in range(config.est_epochs):
        order = tree.rng(f"mi_max/epoch/{epoch}").permutation(data.n)
        for start in range(0, data.n, config.est_batch):
            idx = order[start : start + config.est_batch]
            if len(idx) < 2:
                continue
            pos, neg = est.scores(data.inputs[idx], Tensor(logits[idx]))
            obj = _bound_objective(pos, neg, config.est_bound, ema)
            adam_step(params, [-g for g in ag.grad(obj, params)], opt)
    return est


# Gaussian validation ----------------------------------------------------


@dataclass
class GaussianBenchResult:
    rho: float
    estimate: float
    analytic: float

    @property
    def abs_error(self) -> float:
        return abs(self.estimate - self.analytic)


def gaussian_benchmark(
    rho: float,
    sample_count: int = 20000,
    seed: int = 0,
    steps: int = 3000,
    batch: int = 512,
    lr: float = 1e-3,
    hidden: int = 64,
    ema_decay: float = 0.99,
) -> GaussianBenchResult:
    """Train a fresh one-patch DV estimator on ``sample_count`` correlated
    Gaussian pairs and evaluate it on an independent draw of the same size."""
    from namid.infotheory import gaussian_mi

    analytic = gaussian_mi(rho)
    tree = SeedTree(seed)

    def draw(rng):
        a = rng.standard_normal(sample_count)
        b = rho * a + math.sqrt(1 - rho * rho) * rng.standard_normal(sample_count)
        return a[:, None], b[:, None]

    xs, ys = draw(tree.rng("gauss/train"))
    est = Estimator.init("natural", 1, 1, tree.rng("gauss/init"), patches=1, feat=hidden, hidden=hidden)
    opt = AdamState(lr)
    ema = _EMA(ema_decay)
    batch_rng = tree.rng("gauss/batches")
    params = est.parameters()
    for _ in range(steps):
        idx = batch_rng.integers(0, sample_count, size=batch)
        pos, neg = est.scores(xs[idx], Tensor(ys[idx]))
        obj = _bound_objective(pos, neg, "dv", ema)
        adam_step(params, [-g for g in ag.grad(obj, params)], opt)

    xe, ye = draw(tree.rng("gauss/eval"))
    with no_grad():
        value = est.estimate(xe, Tensor(ye)).scalar
    return GaussianBenchResult(rho, value, analytic)
