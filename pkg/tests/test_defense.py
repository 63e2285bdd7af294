import math

import numpy as np
import pytest

from namid import autograd as ag
from namid.attacks import AttackSpec, pgd
from namid.autograd import MLP, Tensor
from namid.config import RunManifest
from namid.data import Batch, generate_synthetic, load_container, save_container
from namid.defense import (
    Checkpoint,
    clip_grad_norm,
    cosine_loss,
    init_model,
    load_checkpoint,
    load_estimator_pair,
    mi_loss,
    save_checkpoint,
    total_loss,
    train_namid,
    train_standard_at,
)
from namid.errors import ConfigError, DivergenceError, InputError, VersionError
from namid.estimators import Estimator
from namid.evaluation import accuracy


def W(rows):
    return Tensor(np.array(rows, float), True)


def additive_estimator(kind):
    """Two patches of width 1; the score of patch p is exactly ``pattern_p + logits_0``."""
    enc = MLP([W([[1.0]]), W([[1.0]])], [W([0.0]), W([0.0])], ["relu", "linear"])
    sco = MLP([W([[1.0, -1.0], [1.0, -1.0], [0.0, 0.0]]), W([[1.0], [-1.0]])], [W([0.0, 0.0]), W([0.0])],
              ["relu", "linear"])
    return Estimator(kind, enc, sco, patches=2, pattern_dim=2, num_classes=2)


def test_cosine_loss_examples():
    a = np.array([1.0, 2.0, -0.5])
    assert abs(cosine_loss(a, a).item()) < 1e-15
    assert cosine_loss([1.0, 0.0], [0.0, 3.0]).item() == 1.0
    assert math.isclose(cosine_loss(a, -a).item(), 2.0, abs_tol=1e-15)


def test_cosine_loss_errors_and_zero_guard(caplog):
    with pytest.raises(InputError):
        cosine_loss([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(InputError):
        cosine_loss([1.0], [2.0])
    assert cosine_loss([0.0, 0.0], [1.0, 1.0]).item() == 1.0
    assert "zero-norm" in caplog.text


def test_cosine_loss_rowwise_gradient():
    a = Tensor(np.array([[1.0, 2.0], [0.5, -1.0]]), True)
    b = np.array([[2.0, 1.0], [1.0, 1.0]])
    (g,) = ag.grad(ag.mean(cosine_loss(a, b)), [a])
    h = 1e-6
    num = np.zeros_like(g)
    for i in range(2):
        for j in range(2):
            up, down = a.data.copy(), a.data.copy()
            up[i, j] += h
            down[i, j] -= h
            num[i, j] = (cosine_loss(up, b).data.mean() - cosine_loss(down, b).data.mean()) / (2 * h)
    assert np.allclose(g, num, atol=1e-8)


def test_mi_loss_identical_inputs_and_zero_lambda(rng):
    est_n = Estimator.init("natural", 8, 3, rng, patches=4, feat=4, hidden=6)
    est_a = Estimator.init("adversarial", 8, 3, rng, patches=4, feat=4, hidden=6)
    x = rng.uniform(size=(5, 8))
    logits = Tensor(rng.standard_normal((5, 3)))
    loss = mi_loss(est_n, est_a, Batch(x, np.zeros_like(x), np.zeros(5, int)), logits, logits, lam=0.0)
    assert abs(loss.item()) < 1e-15


def test_mi_loss_orthogonal_scores_give_two():
    est_n, est_a = additive_estimator("natural"), additive_estimator("adversarial")
    batch = Batch(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([0]))
    adv = Tensor(np.array([[0.0, 0.0]]))  # scores (1, 0)
    nat = Tensor(np.array([[-1.0, 0.0]]))  # scores (0, -1)
    assert mi_loss(est_n, est_a, batch, nat, adv, lam=0.0).item() == 2.0


def test_mi_loss_empty_selection_skips(rng):
    est = additive_estimator("natural")
    empty = Batch(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, int))
    assert mi_loss(est, additive_estimator("adversarial"), empty, Tensor(np.zeros((0, 2))),
                   Tensor(np.zeros((0, 2))), 0.1) is None


def _np_scores(est, patterns, logits):
    """Independent numpy forward of the per-patch positive scores."""
    def mlp(net, h):
        for w, b, act in zip(net.weights, net.biases, net.activations):
            h = h @ w.data + b.data
            if act == "relu":
                h = np.maximum(h, 0.0)
        return h

    m, P, k = len(patterns), est.patches, est.block_size
    out = np.zeros((m, P))
    for i in range(m):
        for p in range(P):
            block = np.zeros(k)
            chunk = patterns[i, p * k:(p + 1) * k]
            block[:len(chunk)] = chunk
            feat = mlp(est.encoder, block[None, :])[0]
            raw = mlp(est.scorer, np.concatenate([feat, logits[i]])[None, :])[0, 0]
            out[i, p] = est.score_clip * math.tanh(raw / est.score_clip) if est.score_clip else raw
    return out


def _np_dv(est, patterns, logits):
    m = len(patterns)
    pos = _np_scores(est, patterns, logits)
    neg = np.stack([_np_scores(est, patterns[[(i + 1) % m]], logits[[i]])[0] for i in range(m)])
    patch = [pos[:, p].mean() - math.log(np.mean(np.exp(neg[:, p]))) for p in range(est.patches)]
    return float(np.mean(patch))


def _np_cos_loss(a, b):
    return abs(1.0 - float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def hand_fixture():
    rng = np.random.default_rng(2027)  # every score vector has norm > 0.3
    est_n = Estimator.init("natural", 6, 3, rng, patches=3, feat=3, hidden=4, score_clip=5.0)
    est_a = Estimator.init("adversarial", 6, 3, rng, patches=3, feat=3, hidden=4, score_clip=5.0)
    x = rng.uniform(0.1, 0.9, size=(2, 6))
    noise = rng.uniform(-0.1, 0.1, size=(2, 6))
    nat, adv = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    return est_n, est_a, Batch(x, noise, np.array([0, 1])), nat, adv


def test_mi_loss_matches_hand_transcription():
    est_n, est_a, batch, nat, adv = hand_fixture()
    lam = 0.1
    sn_adv, sn_nat = _np_scores(est_n, batch.natural, adv), _np_scores(est_n, batch.natural, nat)
    sa_adv, sa_nat = _np_scores(est_a, batch.noise, adv), _np_scores(est_a, batch.noise, nat)
    cos = np.mean([_np_cos_loss(sn_adv[i], sn_nat[i]) + _np_cos_loss(sa_adv[i], sa_nat[i]) for i in range(2)])
    expected = cos + lam * (_np_dv(est_a, batch.noise, adv) - _np_dv(est_n, batch.natural, adv))
    got = mi_loss(est_n, est_a, batch, Tensor(nat), Tensor(adv), lam).item()
    assert math.isclose(got, expected, rel_tol=1e-10, abs_tol=1e-12)


def test_total_loss_examples():
    est_n, est_a, batch, nat, adv = hand_fixture()
    labels = batch.labels
    ce = ag.softmax_cross_entropy(Tensor(adv), labels).item()
    l_mi = mi_loss(est_n, est_a, batch, Tensor(nat), Tensor(adv), 0.1)
    assert total_loss(Tensor(adv), labels, 0.0, l_mi).item() == ce
    assert total_loss(Tensor(adv), labels, 5.0, None).item() == ce
    assert math.isclose(total_loss(Tensor(adv), labels, 5.0, l_mi).item(), ce + 5 * l_mi.item(), rel_tol=1e-14)


def test_mi_loss_gradient_reaches_logits_only():
    est_n, est_a, batch, nat, adv = hand_fixture()
    adv_t = Tensor(adv, requires_grad=True)
    loss = mi_loss(est_n, est_a, batch, Tensor(nat), adv_t, 0.1)
    params = est_n.parameters() + est_a.parameters()
    ag.backward(loss)
    assert adv_t.grad is not None and np.any(adv_t.grad != 0)
    assert all(p.grad is None for p in params)


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(g, 0.0) is g
    assert clip_grad_norm(g, 10.0) is g
    out = clip_grad_norm(g, 1.0)
    assert math.isclose(math.hypot(out[0][0], out[1][0]), 1.0, rel_tol=1e-15)
    nan = clip_grad_norm([np.array([np.nan])], 1.0)
    assert np.isnan(nan[0]).all()


# training --------------------------------------------------------------------


@pytest.fixture
def splits(tiny_config):
    data = generate_synthetic("two_gaussians", tiny_config.n_train, tiny_config.dim, 5)
    return data


@pytest.fixture
def estimators(rng, tiny_config):
    kw = dict(patches=4, feat=4, hidden=8, score_clip=5.0)
    return (Estimator.init("natural", tiny_config.dim, 2, rng, **kw),
            Estimator.init("adversarial", tiny_config.dim, 2, rng, **kw))


def same_state(a: Checkpoint, b: Checkpoint) -> bool:
    sa, sb = a.to_entries(), b.to_entries()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_standard_at_is_deterministic(tiny_config, splits):
    assert same_state(train_standard_at(tiny_config, splits), train_standard_at(tiny_config, splits))


def test_alpha_zero_reduces_to_standard_at(tiny_config, splits, estimators):
    at = train_standard_at(tiny_config, splits)
    namid = train_namid(tiny_config.replace(alpha=0.0), splits, estimators)
    assert at.step_losses == namid.step_losses
    assert same_state(at, Checkpoint(namid.model, namid.optimizer, namid.epoch, at.config, namid.history,
                                     namid.step_losses))


def test_dropping_both_terms_reduces_to_standard_at(tiny_config, splits, estimators):
    at = train_standard_at(tiny_config, splits)
    cfg = tiny_config.replace(drop_natural_mi=True, drop_adversarial_mi=True)
    namid = train_namid(cfg, splits, estimators)
    assert at.step_losses == namid.step_losses
    assert all(np.array_equal(a, b) for a, b in zip(at.model.state().values(), namid.model.state().values()))


def test_estimators_untouched_by_training(tiny_config, splits, estimators):
    before = [e.to_entries() for e in estimators]
    ckpt = train_namid(tiny_config.replace(eps=0.3), splits, estimators)
    assert sum(r[6] for r in ckpt.history) > 0  # the MI term was actually used
    for b, e in zip(before, estimators):
        after = e.to_entries()
        assert all(np.array_equal(b[k], after[k]) for k in b)


def test_lambda_flag_changes_the_trace(tiny_config, splits, estimators):
    cfg = tiny_config.replace(eps=0.3)
    full = train_namid(cfg, splits, estimators)
    lam0 = train_namid(cfg.replace(zero_lambda=True), splits, estimators)
    assert full.step_losses != lam0.step_losses


def test_resume_is_bit_identical(tiny_config, splits, estimators, tmp_path):
    cfg = tiny_config.replace(epochs=3, eps=0.3)
    full = train_namid(cfg, splits, estimators)
    part = train_namid(cfg, splits, estimators, stop_after=1)
    assert part.epoch == 1
    save_checkpoint(tmp_path / "part.nmid", part)
    resumed = train_namid(cfg, splits, estimators, resume=load_checkpoint(tmp_path / "part.nmid"))
    assert same_state(full, resumed)


def test_checkpoint_round_trip_and_tamper(tiny_config, splits, tmp_path):
    ckpt = train_standard_at(tiny_config.replace(epochs=1), splits)
    path = tmp_path / "m.nmid"
    save_checkpoint(path, ckpt)
    assert same_state(ckpt, load_checkpoint(path))
    entries = load_container(path)
    other = RunManifest(config=tiny_config.replace(seed=99).to_text())
    save_container(tmp_path / "bad.nmid", {k: v for k, v in entries.items() if k != "__manifest"}, other)
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "bad.nmid")


def test_missing_estimators_is_config_error(tiny_config, splits, tmp_path):
    with pytest.raises(ConfigError):
        train_namid(tiny_config, splits)
    with pytest.raises(ConfigError, match="does not exist"):
        load_estimator_pair(tiny_config.replace(estimator_natural=str(tmp_path / "a"),
                                                estimator_adversarial=str(tmp_path / "b")))


def test_divergence_is_reported(tiny_config, splits):
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train_standard_at(tiny_config.replace(lr=1e200, momentum=0.0), splits)


def test_natural_training_fits_separable_data(tiny_config):
    data = generate_synthetic("two_gaussians", 400, 8, 1)
    ckpt = train_standard_at(tiny_config.replace(eps=0.0, epochs=10), data)
    assert accuracy(ckpt.model, data.inputs, data.labels) >= 99.0


def test_adversarial_training_beats_untrained_model(tiny_config):
    cfg = tiny_config.replace(epochs=10, eps=0.1)
    data = generate_synthetic("two_gaussians", 400, 8, 1)
    test = generate_synthetic("two_gaussians", 400, 8, 2)
    trained = train_standard_at(cfg, data).model
    untrained = init_model(cfg, 8, 2)
    spec = AttackSpec("linf", 0.1, 40, 0.025)
    acc = lambda m: accuracy(m, pgd(m, test.inputs, test.labels, spec).adversarial, test.labels)  # noqa: E731
    assert acc(trained) > acc(untrained)
