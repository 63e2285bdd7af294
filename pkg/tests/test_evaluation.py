import statistics

import numpy as np
import pytest

from namid.attacks import AttackSpec
from namid.config import TrainRunConfig
from namid.data import Batch, generate_synthetic
from namid.defense import init_model, train_standard_at
from namid.estimators import Estimator, train_mi_maximizer
from namid.evaluation import (
    ABLATIONS,
    EVAL_HEADER,
    EvalReport,
    EvalRow,
    SuiteEntry,
    ablation_run,
    black_box_eval,
    default_suite,
    evaluate,
    proof_of_concept,
    separation_csv,
    separation_gaps,
    separation_report,
    train_surrogate,
)
from namid.errors import InputError


@pytest.fixture
def toy(tiny_config):
    train = generate_synthetic("two_gaussians", 200, 8, 1)
    test = generate_synthetic("two_gaussians", 120, 8, 2)
    model = train_standard_at(tiny_config.replace(epochs=5), train).model
    return tiny_config, train, test, model


def test_zero_eps_row_equals_none_row(toy):
    _, _, test, model = toy
    suite = [SuiteEntry("None", None), SuiteEntry("eps0", AttackSpec("linf", 0.0, 10))]
    none, zero = evaluate(model, test, suite).rows
    assert zero.adversarial_acc == none.adversarial_acc == none.natural_acc


def test_untrained_model_is_at_chance():
    data = generate_synthetic("grid_digits", 2000, 64, 0)
    model = init_model(TrainRunConfig(), 64, 10)
    report = evaluate(model, data, [SuiteEntry("None", None)])
    assert abs(report.rows[0].natural_acc - 10.0) <= 5.0


def test_more_pgd_iterations_never_help(toy):
    _, _, test, model = toy
    report = evaluate(model, test, default_suite("linf", 0.15, (10, 40)))
    assert report.find("model", "PGD-40").adversarial_acc <= report.find("model", "PGD-10").adversarial_acc + 1.0


def test_default_suite_shape():
    suite = default_suite("l2", 0.5, (10, 40))
    assert [e.label for e in suite] == ["None", "FGSM", "PGD-10", "PGD-40"]
    assert suite[1].spec.steps == 1 and suite[1].spec.step == 0.5
    assert suite[3].spec.step == 0.125 and suite[3].spec.norm == "l2"


def test_surrogate_equal_to_target_matches_white_box(toy):
    _, _, test, model = toy
    suite = default_suite("linf", 0.1, (5,))
    white = evaluate(model, test, suite, "m", seed=3)
    black = black_box_eval(model, model, test, suite, "m", seed=3)
    assert white.accuracy_csv() == black.accuracy_csv()


def test_black_box_zero_eps_is_natural_accuracy(toy):
    cfg, train, test, model = toy
    surrogate = train_surrogate(cfg, train).model
    rep = black_box_eval(model, surrogate, test, [SuiteEntry("eps0", AttackSpec("linf", 0.0, 3))])
    assert rep.rows[0].adversarial_acc == rep.rows[0].natural_acc


def test_transfer_attack_is_weaker_than_white_box(tiny_config):
    gaps = []
    for seed in range(3):
        cfg = tiny_config.replace(seed=seed, epochs=5, eps=0.15)
        train = generate_synthetic("two_gaussians", 200, 8, seed)
        test = generate_synthetic("two_gaussians", 200, 8, seed + 100)
        target = train_standard_at(cfg, train).model
        surrogate = train_surrogate(cfg, train).model
        suite = [SuiteEntry("PGD-10", AttackSpec("linf", 0.15, 10))]
        gaps.append(black_box_eval(target, surrogate, test, suite).rows[0].adversarial_acc
                    - evaluate(target, test, suite).rows[0].adversarial_acc)
    assert statistics.median(gaps) >= 0


def test_surrogate_differs_from_target(toy):
    cfg, train, _, model = toy
    surrogate = train_surrogate(cfg, train).model
    assert surrogate.sizes != model.sizes


def test_report_csv_and_lookup():
    report = EvalReport([EvalRow("d", "None", "-", 0.0, 0, 90.0, 90.0, 1, 0.25)])
    text = report.accuracy_csv()
    assert text.splitlines()[0] == ",".join(EVAL_HEADER)
    assert "0.25" not in text and "0.25" in report.accuracy_csv(runtime=True)
    assert report.find("d", "None").natural_acc == 90.0
    with pytest.raises(KeyError):
        report.find("d", "FGSM")


def test_empty_suite_rejected(toy):
    _, _, test, model = toy
    with pytest.raises(InputError):
        evaluate(model, test, [])


# proof of concept ------------------------------------------------------------


@pytest.fixture
def poc_setup(tiny_config):
    train = generate_synthetic("two_gaussians", 200, 8, 1)
    test = generate_synthetic("two_gaussians", 100, 8, 2)
    cfg = tiny_config.replace(epochs=5)
    model = train_standard_at(cfg.replace(eps=0.0), train).model
    est = train_mi_maximizer(model, train, cfg)
    return model, est, test


def test_zero_iteration_curves_coincide(poc_setup):
    model, est, test = poc_setup
    curves = proof_of_concept(model, est, test, [0], eps=0.3)
    assert curves.mi_natural[0] == curves.mi_adversarial[0] == curves.mi_cross[0]
    assert curves.csv().splitlines()[0] == "steps,eps,adversarial_acc,mi_natural,mi_adversarial,mi_cross"


def test_offset_preserves_gaps(poc_setup):
    model, est, test = poc_setup
    curves = proof_of_concept(model, est, test, [1, 3], eps=0.3)
    raw_nat = est.estimate(test.inputs, model.predict(test.inputs)).scalar
    assert abs((curves.mi_natural[0] + curves.offset) - raw_nat) <= 1e-9
    assert min(curves.mi_natural + curves.mi_adversarial + curves.mi_cross) >= 0


# separation ------------------------------------------------------------------


def test_separation_gap_zero_without_noise(rng, tiny_config):
    data = generate_synthetic("two_gaussians", 50, 8, 1)
    model = train_standard_at(tiny_config.replace(epochs=1), data).model
    kw = dict(patches=4, feat=4, hidden=6)
    pair = (Estimator.init("natural", 8, 2, rng, **kw), Estimator.init("adversarial", 8, 2, rng, **kw))
    batch = Batch(data.inputs, np.zeros_like(data.inputs), data.labels)
    rows = separation_report({"eq5": pair}, model, batch)
    assert all(g == 0 for g in separation_gaps(rows).values())
    assert separation_csv(rows) == separation_csv(separation_report({"eq5": pair}, model, batch))
    assert separation_csv(rows).splitlines()[0] == "mode,estimator,input,mean,normalized_mean,gap"


# ablations -------------------------------------------------------------------


def test_ablation_run_variants_and_standard_row(tiny_config):
    cfg = tiny_config.replace(eps=0.3, epochs=2)
    train = generate_synthetic("two_gaussians", 160, 8, 1)
    test = generate_synthetic("two_gaussians", 80, 8, 2)
    result = ablation_run(cfg, train, test)
    defenses = list(dict.fromkeys(r.defense for r in result.report.rows))
    assert defenses == ["standard", *ABLATIONS]
    attacks = {r.attack for r in result.report.rows}
    assert attacks == {"None", "FGSM", f"PGD-{cfg.eval_steps}"}
    solo = evaluate(train_standard_at(cfg, train).model, test,
                    default_suite(cfg.norm, cfg.eps, (cfg.eval_steps,)), "standard", cfg.seed)
    standard_rows = EvalReport([r for r in result.report.rows if r.defense == "standard"])
    assert standard_rows.accuracy_csv() == solo.accuracy_csv()
    assert result.checkpoints["full"].step_losses != result.checkpoints["lambda0"].step_losses
