import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adasmooth.errors import FormatError, NumericalError, ShapeError
from adasmooth.nncore import (Dataset, Layer, Net, Tensor, TrainConfig, accuracy, forward, init_net,
                              input_gradient, load_net, save_net, softmax, train_standard, train_trades)
from adasmooth.nncore import autodiff as ad
from adasmooth.nncore.losses import cross_entropy
from adasmooth.nncore.net import net_from_dict, net_to_dict

from conftest import central_diff, grad_close


def _numpy_forward(net, x):
    h = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        h = layer.weight @ h + layer.bias
        if layer.activation == "relu":
            h = np.where(h > 0, h, 0.0)
        elif layer.activation == "tanh":
            h = np.tanh(h)
    return h


# -- forward --------------------------------------------------------------------------------
def test_identity_layer_forward():
    net = Net((Layer(np.eye(2), np.zeros(2), "linear"),))
    logits, acts = forward(net, np.array([1.0, 2.0]))
    assert np.array_equal(logits, [1.0, 2.0])
    assert acts == []


def test_relu_layer_forward():
    net = Net((Layer(np.eye(2), np.full(2, -1.5), "relu"),))
    assert np.array_equal(forward(net, np.array([1.0, 2.0]))[0], [0.0, 0.5])


def test_forward_matches_independent_evaluation(rng):
    net = init_net([3, 7, 5, 4], rng)
    x = rng.normal(size=3)
    assert np.allclose(forward(net, x)[0], _numpy_forward(net, x), rtol=0, atol=1e-12)


def test_captured_activations_have_declared_sizes(rng):
    net = init_net([3, 7, 5, 4], rng)
    _, acts = forward(net, rng.normal(size=(6, 3)))
    assert [a.shape for a in acts] == [(6, 7), (6, 5)]
    assert net.capture_sizes == (7, 5)


def test_forward_rejects_dimension_mismatch(rng):
    net = init_net([3, 4, 2], rng)
    with pytest.raises(ShapeError):
        forward(net, np.zeros(4))


def test_layers_must_chain():
    with pytest.raises(ShapeError):
        Net((Layer(np.eye(2), np.zeros(2)), Layer(np.eye(3), np.zeros(3))))


def test_forward_is_deterministic(rng):
    net = init_net([4, 8, 3], rng)
    x = rng.normal(size=(5, 4))
    assert np.array_equal(forward(net, x)[0], forward(net, x)[0])


# -- softmax --------------------------------------------------------------------------------
def test_softmax_symmetric():
    assert np.array_equal(softmax([0.0, 0.0]), [0.5, 0.5])


def test_softmax_large_logit_no_overflow():
    p = softmax([1000.0, 0.0])
    assert p[0] == 1.0 and 0.0 <= p[1] < 1e-300


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    z = [mpmath.mpf(1), mpmath.mpf(2), mpmath.mpf(3)]
    total = sum(mpmath.e ** v for v in z)
    want = [float(mpmath.e ** v / total) for v in z]
    assert np.allclose(softmax([1.0, 2.0, 3.0]), want, rtol=1e-15, atol=0)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericalError):
        softmax([np.nan, 0.0])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
              elements=st.floats(-700, 700)))
def test_softmax_is_probability_vector(z):
    p = softmax(z)
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)


# -- gradients ------------------------------------------------------------------------------
def test_softmax_regression_gradient_closed_form(rng):
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    net = Net((Layer(w, b, "linear"),))
    x, y = rng.normal(size=4), 1
    p = softmax(w @ x + b)
    onehot = np.eye(3)[y]
    assert np.allclose(input_gradient(net, x, y), w.T @ (p - onehot), atol=1e-12)


def test_constant_net_has_zero_gradient(rng):
    net = Net((Layer(np.zeros((2, 3)), np.array([1.0, -1.0]), "linear"),))
    assert np.array_equal(input_gradient(net, rng.normal(size=3), 0), np.zeros(3))


def test_input_gradient_rejects_bad_class(rng):
    net = init_net([3, 4, 2], rng)
    with pytest.raises(ShapeError):
        input_gradient(net, np.zeros(3), 5)


@pytest.mark.parametrize("loss", ["ce", "targeted_ce", "margin"])
@given(seed=st.integers(0, 2**31 - 1))
def test_input_gradient_matches_finite_differences(loss, seed):
    r = np.random.default_rng(seed)
    net = init_net([3, 6, 5, 3], r, activation="tanh")
    x = r.normal(size=3)
    y, t = int(r.integers(3)), int(r.integers(3))
    target = t if loss == "targeted_ce" else None

    def f(z):
        from adasmooth.nncore.losses import attack_objective
        return float(attack_objective(net.logits_t(Tensor(z[None])), np.array([y]), loss,
                                      target=None if target is None else np.array([target])).data[0])

    assert grad_close(input_gradient(net, x, y, loss, target), central_diff(f, x))


@given(seed=st.integers(0, 2**31 - 1))
def test_parameter_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    net = init_net([3, 5, 3], r, activation="tanh")
    x, y = r.normal(size=(4, 3)), r.integers(3, size=4)
    params = net.params()
    pts = [Tensor(p, requires_grad=True) for p in params]
    cross_entropy(net.apply(Tensor(x), pts)[0], y).sum().backward()
    for k, p in enumerate(params):
        def f(v, k=k):
            ps = [q if j != k else v for j, q in enumerate(params)]
            return float(cross_entropy(net.with_params(ps).logits_t(Tensor(x)), y).data.sum())
        assert grad_close(pts[k].grad, central_diff(f, p))


def test_autodiff_ops_match_finite_differences(rng):
    a = rng.uniform(0.5, 1.5, size=(3, 4))
    ops = {
        "exp": lambda t: ad.exp(t).sum(),
        "log": lambda t: ad.log(t).sum(),
        "sigmoid": lambda t: ad.sigmoid(t).sum(),
        "softplus": lambda t: ad.softplus(t).sum(),
        "div": lambda t: (t / (t * t + 1.0)).sum(),
        "log_softmax": lambda t: (ad.log_softmax(t) * np.arange(4.0)).sum(),
        "tmax": lambda t: ad.tmax(t * np.arange(1.0, 5.0), axis=1).sum(),
        "concat": lambda t: (ad.concat([t, t * 2.0], axis=1) * ad.concat([t, t], axis=1)).sum(),
    }
    for name, f in ops.items():
        t = Tensor(a, requires_grad=True)
        f(t).backward()
        num = central_diff(lambda v: float(f(Tensor(v)).data), a)
        assert grad_close(t.grad, num), name


# -- training -------------------------------------------------------------------------------
def _two_blobs(rng, n=100):
    x = np.concatenate([rng.normal([-2, 0], 0.3, (n, 2)), rng.normal([2, 0], 0.3, (n, 2))])
    return Dataset(x, np.repeat([0, 1], n), 2)


def test_standard_training_separates_blobs(rng):
    data = _two_blobs(rng)
    # The closed-form separator x0 = 0 classifies the blobs perfectly.
    assert np.all((data.x[:, 0] > 0) == (data.y == 1))
    log = []
    net = train_standard(init_net([2, 8, 2], rng), data, TrainConfig(epochs=20, lr=1e-2), log)
    assert accuracy(net, data) >= 0.99
    assert log[-1] < log[0]


def test_trades_with_zero_beta_is_standard_training(rng):
    from adasmooth.attacks import AttackSpec

    data = _two_blobs(rng, 40)
    net = init_net([2, 6, 2], np.random.default_rng(0))
    cfg = TrainConfig(epochs=3, lr=1e-2, seed=5, beta=0.0, attack=AttackSpec("linf", 0.1, 3))
    log_std, log_trades = [], []
    a = train_standard(net, data, cfg, log_std)
    b = train_trades(net, data, cfg, log_trades)
    assert log_std == log_trades
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_training_divergence_is_reported(rng):
    data = _two_blobs(rng, 10)
    bad = Dataset(data.x * np.inf, data.y, 2)
    with pytest.raises(NumericalError), np.errstate(all="ignore"):
        train_standard(init_net([2, 4, 2], rng), bad, TrainConfig(epochs=1))


# -- serialization --------------------------------------------------------------------------
def test_net_roundtrip_is_bit_exact(rng, tmp_path):
    net = init_net([3, 5, 2], rng, activation="tanh")
    save_net(net, tmp_path / "n.json")
    back = load_net(tmp_path / "n.json")
    assert all(np.array_equal(p, q) for p, q in zip(net.params(), back.params()))
    assert [l.activation for l in back.layers] == [l.activation for l in net.layers]
    assert back.capture == net.capture


def test_net_checkpoint_rejects_other_formats(rng):
    obj = net_to_dict(init_net([2, 2], rng))
    obj["format"] = "something-else"
    with pytest.raises(FormatError):
        net_from_dict(json.loads(json.dumps(obj)))
