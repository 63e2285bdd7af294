"""Evaluation harnesses: white-box and transfer accuracy, the standard-MI
proof of concept, estimator separation and ablations.

All accuracies come from :func:`accuracy`, so white-box and black-box rows
are counted identically. MI summaries are offset-normalized: a common shift
moves the smallest per-sample contribution to 0, which changes no ordering
and no gap.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from namid.attacks import AttackSpec, pgd
from namid.autograd import MLP, no_grad
from namid.config import SeedTree, TrainRunConfig, root_seed
from namid.data import Batch, DatasetSplit, csv_text, write_csv
from namid.defense import Checkpoint, train, train_attack_spec, train_standard_at
from namid.errors import InputError
from namid.estimators import Estimator, mi_terms, train_estimators, train_mi_maximizer

log = logging.getLogger(__name__)

EVAL_HEADER = ("defense", "attack", "norm", "eps", "steps", "natural_acc", "adversarial_acc", "seed")
MI_HEADER = ("estimator", "dataset", "setting", "mean", "normalized_mean")


@dataclass
class EvalRow:
    defense: str
    attack: str
    norm: str
    eps: float
    steps: int
    natural_acc: float
    adversarial_acc: float
    seed: int
    runtime: float = 0.0

    def cells(self, runtime: bool = False) -> list:
        out = [self.defense, self.attack, self.norm, self.eps, self.steps,
               self.natural_acc, self.adversarial_acc, self.seed]
        return out + [self.runtime] if runtime else out


@dataclass
class MIRow:
    estimator: str
    dataset: str
    setting: str
    mean: float
    normalized_mean: float

    def cells(self) -> list:
        return [self.estimator, self.dataset, self.setting, self.mean, self.normalized_mean]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    mi_rows: list[MIRow] = field(default_factory=list)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        self.mi_rows.extend(other.mi_rows)
        return self

    def find(self, defense: str, attack: str) -> EvalRow:
        for row in self.rows:
            if row.defense == defense and row.attack == attack:
                return row
        raise KeyError((defense, attack))

    def accuracy_csv(self, runtime: bool = False) -> str:
        # wall-clock runtime is opt-in: it would break byte-identical reruns
        header = list(EVAL_HEADER) + (["runtime_s"] if runtime else [])
        return csv_text(header, [r.cells(runtime) for r in self.rows])

    def mi_csv(self) -> str:
        return csv_text(list(MI_HEADER), [r.cells() for r in self.mi_rows])

    def write(self, path, runtime: bool = False) -> None:
        write_csv(path, list(EVAL_HEADER) + (["runtime_s"] if runtime else []),
                  [r.cells(runtime) for r in self.rows])


def accuracy(model: MLP, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of rows whose argmax prediction equals the label."""
    if len(labels) == 0:
        raise InputError("accuracy of an empty set is undefined")
    pred = np.argmax(model.predict(inputs), axis=1)
    return 100.0 * float(np.mean(pred == labels))


@dataclass(frozen=True)
class SuiteEntry:
    label: str
    spec: AttackSpec | None  # None means no attack


def default_suite(norm: str, eps: float, pgd_steps=(10, 40)) -> list[SuiteEntry]:
    """``None``, FGSM (one full-size step) and PGD at each iteration count, step eps/4."""
    suite = [SuiteEntry("None", None), SuiteEntry("FGSM", AttackSpec(norm, eps, 1, eps))]
    suite += [SuiteEntry(f"PGD-{k}", AttackSpec(norm, eps, k, eps / 4)) for k in pgd_steps]
    return suite


def _run_suite(
    source: MLP, target: MLP, data: DatasetSplit, suite: list[SuiteEntry], defense: str, seed: int,
) -> EvalReport:
    if not suite:
        raise InputError("attack suite is empty")
    report = EvalReport()
    natural = accuracy(target, data.inputs, data.labels)
    tree = SeedTree(seed)
    for entry in suite:
        t0 = time.perf_counter()
        if entry.spec is None:
            adv_acc, norm, eps, steps = natural, "-", 0.0, 0
        else:
            spec = entry.spec
            batch = pgd(source, data.inputs, data.labels, spec, rng=tree.rng(f"eval/{entry.label}"))
            adv_acc = accuracy(target, batch.adversarial, data.labels)
            norm, eps, steps = spec.norm, spec.eps, spec.steps
        report.rows.append(EvalRow(defense, entry.label, norm, eps, steps, natural, adv_acc, seed,
                                   time.perf_counter() - t0))
    return report


def evaluate(model: MLP, data: DatasetSplit, suite: list[SuiteEntry], defense: str = "model",
             seed: int = 0) -> EvalReport:
    """White-box accuracy of ``model`` under every attack of ``suite``."""
    return _run_suite(model, model, data, suite, defense, seed)


def black_box_eval(target: MLP, surrogate: MLP, data: DatasetSplit, suite: list[SuiteEntry],
                   defense: str = "model", seed: int = 0) -> EvalReport:
    """Transfer accuracy: examples crafted on ``surrogate``, scored on ``target``."""
    return _run_suite(surrogate, target, data, suite, defense, seed)


def train_surrogate(config: TrainRunConfig, data: DatasetSplit) -> Checkpoint:
    """Standard AT on a wider MLP under a seed derived from, but distinct from, the run seed."""
    seed = SeedTree(root_seed(config.seed)).derive("surrogate") % 2**63
    return train_standard_at(config.replace(seed=seed, hidden=config.surrogate_hidden), data)


# proof of concept ---------------------------------------------------------

POC_HEADER = ("steps", "eps", "adversarial_acc", "mi_natural", "mi_adversarial", "mi_cross")


@dataclass
class PoCCurves:
    """Offset-normalized means of I(x,h(x)), I(x~,h(x~)) and I(x,h(x~)) per attack setting."""

    steps: list[int]
    eps: float
    adversarial_acc: list[float]
    mi_natural: list[float]
    mi_adversarial: list[float]
    mi_cross: list[float]
    offset: float = 0.0

    def rows(self) -> list[list]:
        return [list(r) for r in zip(self.steps, [self.eps] * len(self.steps), self.adversarial_acc,
                                     self.mi_natural, self.mi_adversarial, self.mi_cross)]

    def csv(self) -> str:
        return csv_text(list(POC_HEADER), self.rows())


def proof_of_concept(
    model: MLP,
    estimator: Estimator,
    data: DatasetSplit,
    steps_list,
    eps: float,
    norm: str = "linf",
) -> PoCCurves:
    """Standard-MI estimates on natural and PGD examples at each iteration count.

    Per-sample contributions from every setting and curve share one offset,
    chosen so the smallest contribution overall is 0.
    """
    x, y = data.inputs, data.labels
    with no_grad():
        base = estimator.estimate(x, model.predict(x)).per_sample()
        per_setting = []
        for k in steps_list:
            if k == 0 or eps == 0:
                adv = x
            else:
                adv = pgd(model, x, y, AttackSpec(norm, eps, int(k), eps / 4)).adversarial
            adv_logits = model.predict(adv)
            per_setting.append((
                accuracy(model, adv, y),
                estimator.estimate(adv, adv_logits).per_sample(),
                estimator.estimate(x, adv_logits).per_sample(),
            ))
    offset = min([base.min()] + [min(a.min(), c.min()) for _, a, c in per_setting])
    return PoCCurves(
        steps=[int(k) for k in steps_list],
        eps=float(eps),
        adversarial_acc=[acc for acc, _, _ in per_setting],
        mi_natural=[float(base.mean() - offset)] * len(per_setting),
        mi_adversarial=[float(a.mean() - offset) for _, a, _ in per_setting],
        mi_cross=[float(c.mean() - offset) for _, _, c in per_setting],
        offset=float(offset),
    )


def run_proof_of_concept(config: TrainRunConfig, train_split: DatasetSplit, test_split: DatasetSplit):
    """Naturally train a model, fit the standard-MI estimator on natural data, probe it."""
    natural_cfg = config.replace(eps=0.0, step_size=None)
    model = train_standard_at(natural_cfg, train_split).model
    est = train_mi_maximizer(model, train_split, config)
    return proof_of_concept(model, est, test_split, config.poc_steps, config.poc_eps, config.norm), model, est


# estimator separation -----------------------------------------------------

SEPARATION_HEADER = ("mode", "estimator", "input", "mean", "normalized_mean", "gap")


@dataclass
class SeparationRow:
    mode: str
    estimator: str  # natural | adversarial
    input: str  # natural | adversarial
    mean: float
    normalized_mean: float
    gap: float  # own-input mean minus other-input mean, repeated on both rows


def separation_report(
    estimators: dict[str, tuple[Estimator, Estimator]],
    model: MLP,
    batch: Batch,
) -> list[SeparationRow]:
    """Mean natural and adversarial MI on natural vs adversarial logits, per training mode.

    ``batch`` holds the held-out natural inputs and the frozen model's
    adversarial noise for them.
    """
    with no_grad():
        nat_logits = model.predict(batch.natural)
        adv_logits = model.predict(batch.adversarial)
    rows = []
    for mode, (est_n, est_a) in estimators.items():
        with no_grad():
            terms = mi_terms(est_n, est_a, batch.natural, batch.noise, nat_logits, adv_logits)
        for kind, own, other in (("natural", "n_nat", "n_adv"), ("adversarial", "a_adv", "a_nat")):
            own_s, other_s = terms[own].per_sample(), terms[other].per_sample()
            offset = min(own_s.min(), other_s.min())
            gap = float(own_s.mean() - other_s.mean())
            own_input = "natural" if kind == "natural" else "adversarial"
            other_input = "adversarial" if kind == "natural" else "natural"
            rows.append(SeparationRow(mode, kind, own_input, float(own_s.mean()),
                                      float(own_s.mean() - offset), gap))
            rows.append(SeparationRow(mode, kind, other_input, float(other_s.mean()),
                                      float(other_s.mean() - offset), gap))
    return rows


def separation_gaps(rows: list[SeparationRow]) -> dict[tuple[str, str], float]:
    return {(r.mode, r.estimator): r.gap for r in rows}


def separation_csv(rows: list[SeparationRow]) -> str:
    return csv_text(list(SEPARATION_HEADER), [dataclasses.astuple(r) for r in rows])


def heldout_attack_batch(model: MLP, config: TrainRunConfig, data: DatasetSplit) -> Batch:
    """Training-strength PGD on held-out data without a random start."""
    spec = dataclasses.replace(train_attack_spec(config), random_start=False)
    return pgd(model, data.inputs, data.labels, spec)


def run_separation(config: TrainRunConfig, train_split: DatasetSplit, test_split: DatasetSplit,
                   base_model: MLP | None = None):
    """Standard AT model, then own-MI (eq4) and gap-maximizing (eq5) estimator pairs, scored on held-out data."""
    model = base_model if base_model is not None else train_standard_at(config, train_split).model
    spec = train_attack_spec(config)
    pairs = {mode: train_estimators(model, train_split, spec, config, mode=mode) for mode in ("eq4", "eq5")}
    rows = separation_report(pairs, model, heldout_attack_batch(model, config, test_split))
    return rows, model, pairs


# ablations ----------------------------------------------------------------

ABLATIONS = {
    "full": {},
    "no_adv_MI": {"drop_adversarial_mi": True},
    "no_nat_MI": {"drop_natural_mi": True},
    "lambda0": {"zero_lambda": True},
}


@dataclass
class AblationResult:
    report: EvalReport
    checkpoints: dict[str, Checkpoint]
    estimators: tuple[Estimator, Estimator]


def ablation_run(
    config: TrainRunConfig,
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    estimators: tuple[Estimator, Estimator] | None = None,
) -> AblationResult:
    """Train ``standard`` AT and each NAMID variant from the same seed; evaluate FGSM and PGD.

    Estimators, when not supplied, are fitted against the ``standard`` model,
    which doubles as the pre-trained target.
    """
    standard = train_standard_at(config, train_split)
    if estimators is None:
        estimators = train_estimators(standard.model, train_split, train_attack_spec(config), config)
    suite = default_suite(config.norm, config.eps, (config.eval_steps,))
    seed = root_seed(config.seed)
    report = evaluate(standard.model, test_split, suite, "standard", seed)
    ckpts = {"standard": standard}
    for name, flags in ABLATIONS.items():
        ckpt = train(config.replace(**flags), train_split, estimators)
        ckpts[name] = ckpt
        report.extend(evaluate(ckpt.model, test_split, suite, name, seed))
        log.info("ablation %s done", name)
    return AblationResult(report, ckpts, estimators)
