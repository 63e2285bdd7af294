import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from namid import autograd as ag
from namid.autograd import MLP, OptimizerState, Tensor, sgd_step
from namid.errors import DimensionError, DivergenceError, InputError, StateError


def linear_net(w, b, act="linear"):
    return MLP([Tensor(np.asarray(w, float), True)], [Tensor(np.asarray(b, float), True)], [act])


def fd_check(loss_fn, params, h=1e-5):
    """Largest relative error between autodiff and central differences."""
    grads = ag.grad(loss_fn(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            num = (up - down) / (2 * h)
            ana = g.reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(1.0, abs(num), abs(ana)))
    return worst


# forward -------------------------------------------------------------------


def test_zero_weights_give_zero_logits(rng):
    net = MLP.init([5, 4, 3], rng)
    for p in net.parameters():
        p.data[...] = 0.0
    assert np.array_equal(net.predict(rng.uniform(size=(7, 5))), np.zeros((7, 3)))


def test_identity_layer():
    net = linear_net(np.eye(2), np.zeros(2))
    assert np.array_equal(net.predict(np.array([[3.0, -2.0]])), [[3.0, -2.0]])


def test_two_layer_relu_hand_fixture():
    w1 = [[1.0, -1.0, 0.5], [2.0, 0.0, -1.0]]
    w2 = [[1.0, 0.0], [-1.0, 2.0], [0.5, 0.5]]
    net = MLP(
        [Tensor(np.array(w1), True), Tensor(np.array(w2), True)],
        [Tensor(np.array([0.0, 1.0, 0.5]), True), Tensor(np.array([0.1, -0.2]), True)],
        ["relu", "linear"],
    )
    # hidden pre-activation (2, 0, 0.5) after bias; output (2.25, 0.25) + bias
    assert np.allclose(net.predict(np.array([[1.0, 0.5]])), [[2.35, 0.05]], rtol=0, atol=1e-15)


def test_forward_shape_mismatch_names_both_shapes(rng):
    net = MLP.init([4, 3], rng)
    with pytest.raises(DimensionError, match=r"\(2, 5\).*4"):
        net.forward(np.zeros((2, 5)))


def test_inconsistent_layers_rejected(rng):
    with pytest.raises(DimensionError):
        MLP([Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2)))], [Tensor(np.zeros(4)), Tensor(np.zeros(2))],
            ["relu", "linear"])


def test_input_constructor_rejects_non_finite():
    with pytest.raises(InputError):
        ag.tensor([1.0, np.nan])
    with pytest.raises(InputError):
        ag.tensor([np.inf])


# backward ------------------------------------------------------------------


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    (g,) = ag.grad(x * x, [x])
    assert g == 6.0


def test_constant_loss_has_zero_gradients(rng):
    net = MLP.init([3, 2], rng)
    loss = Tensor(1.0) + ag.mean(net.forward(np.ones((2, 3))) * 0.0)
    assert all(np.all(g == 0) for g in ag.grad(loss, net.parameters()))


def test_backward_without_graph_is_state_error():
    with pytest.raises(StateError):
        ag.backward(Tensor(1.0))
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(StateError):
        ag.backward(x * 2.0)  # not scalar


def test_no_grad_records_nothing():
    x = Tensor(2.0, requires_grad=True)
    with ag.no_grad():
        y = x * x
    assert not y.requires_grad
    with ag.no_grad(), ag.enable_grad():
        assert (x * x).requires_grad


def test_random_two_layer_net_matches_finite_differences(rng):
    net = MLP.init([6, 5, 3], rng)
    x = rng.uniform(size=(4, 6))
    y = np.array([0, 2, 1, 2])
    err = fd_check(lambda: ag.softmax_cross_entropy(net.forward(x), y), net.parameters())
    assert err < 1e-4


def test_input_gradient_matches_finite_differences(rng):
    net = MLP.init([5, 4, 3], rng)
    x = Tensor(rng.uniform(size=(3, 5)), requires_grad=True)
    err = fd_check(lambda: ag.softmax_cross_entropy(net.forward(x, train=False), [0, 1, 2]), [x])
    assert err < 1e-4


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "tanh", "softplus", "logsumexp", "log_mean_exp"])
def test_elementwise_and_reduction_gradients(op, rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    fn = getattr(ag, op)
    if op in ("logsumexp", "log_mean_exp"):
        loss = lambda: ag.sum_(fn(x, axis=1) * np.array([1.0, -2.0, 0.5]))  # noqa: E731
    else:
        loss = lambda: ag.sum_(fn(x) * np.arange(12.0).reshape(3, 4))  # noqa: E731
    assert fd_check(loss, [x]) < 1e-6


def test_cosine_similarity_gradient(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    loss = lambda: ag.sum_(ag.cosine_similarity(a, b) * np.array([1.0, 2.0, -1.0]))  # noqa: E731
    assert fd_check(loss, [a, b]) < 1e-6


def test_take_concat_reshape_gradients(rng):
    a = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)

    def loss():
        c = ag.concat([a, b], axis=1)
        t = ag.take(c, np.array([0, 0, 3, 1]))
        return ag.sum_(ag.reshape(t, (2, 10)) * np.arange(20.0).reshape(2, 10))

    assert fd_check(loss, [a, b]) < 1e-6


def test_linearity_of_backward(rng):
    net = MLP.init([4, 3, 2], rng)
    x = rng.uniform(size=(5, 4))
    y = np.array([0, 1, 1, 0, 1])
    params = net.parameters()
    l1 = lambda: ag.softmax_cross_entropy(net.forward(x), y)  # noqa: E731
    l2 = lambda: ag.mean(net.forward(x) * net.forward(x))  # noqa: E731
    g_sum = ag.grad(l1() + l2(), params)
    g1, g2 = ag.grad(l1(), params), ag.grad(l2(), params)
    for a, b, c in zip(g_sum, g1, g2):
        assert np.allclose(a, b + c, rtol=1e-13, atol=1e-15)


# cross-entropy -------------------------------------------------------------


def test_uniform_logits_give_log_c():
    assert math.isclose(ag.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item(), math.log(4),
                        rel_tol=0, abs_tol=1e-15)


def test_confident_correct_logit_gives_near_zero_loss():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 100.0
    assert ag.softmax_cross_entropy(Tensor(logits), [1, 2]).item() < 1e-10


def test_cross_entropy_hand_value():
    # ln(e + e^2 + e^3) - 3
    assert math.isclose(ag.softmax_cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [2]).item(),
                        0.40760596444438013, rel_tol=1e-14)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(InputError):
        ag.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(InputError):
        ag.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [-1])


# SGD -----------------------------------------------------------------------


def test_zero_gradient_leaves_parameters():
    w = Tensor(np.array([1.0, -2.0]), True)
    sgd_step([w], [np.zeros(2)], OptimizerState(0.1, 0.9, 0.0))
    assert np.array_equal(w.data, [1.0, -2.0])


def test_plain_sgd_step():
    w = Tensor(np.array(1.0), True)
    sgd_step([w], [np.array(2.0)], OptimizerState(0.1))
    assert math.isclose(float(w.data), 0.8, abs_tol=1e-15)


def test_momentum_two_steps():
    w = Tensor(np.array(0.0), True)
    state = OptimizerState(0.1, 0.9, 0.0)
    for _ in range(2):
        sgd_step([w], [np.array(1.0)], state)
    assert math.isclose(float(w.data), -0.29, abs_tol=1e-15)


def test_coupled_weight_decay():
    w = Tensor(np.array(2.0), True)
    sgd_step([w], [np.array(0.5)], OptimizerState(0.1, 0.0, 0.25))
    assert math.isclose(float(w.data), 2.0 - 0.1 * (0.5 + 0.25 * 2.0), abs_tol=1e-15)


def test_non_finite_gradient_names_parameter():
    w = Tensor(np.zeros(2), True)
    with pytest.raises(DivergenceError, match="layer0.bias"):
        sgd_step([w], [np.array([0.0, np.nan])], OptimizerState(0.1), ["layer0.bias"])


def test_momentum_range():
    with pytest.raises(InputError):
        OptimizerState(0.1, momentum=1.0)


def test_training_steps_are_deterministic():
    def run():
        net = MLP.init([4, 6, 3], np.random.Generator(np.random.Philox(3)))
        state = OptimizerState(0.05, 0.9, 1e-3)
        x = np.random.Generator(np.random.Philox(4)).uniform(size=(16, 4))
        y = np.arange(16) % 3
        for _ in range(5):
            sgd_step(net.parameters(), ag.grad(ag.softmax_cross_entropy(net.forward(x), y), net.parameters()), state)
        return net.state()

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_dv_style_log_mean_exp_is_shift_invariant(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((rows, cols)) * 5
    base = ag.log_mean_exp(Tensor(a), axis=1).data
    shifted = ag.log_mean_exp(Tensor(a + 123.0), axis=1).data
    assert np.allclose(shifted - 123.0, base, atol=1e-9)
