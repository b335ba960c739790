from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from adasmooth.errors import ConfigError, ShapeError
from adasmooth.mixing import (MixConfig, MixedClassifier, alpha_from_gamma, gamma_from_alpha,
                              mix_final, mix_smo1, mix_smo2, mix_smo3, mixed_forward, trust_factors)
from adasmooth.mixnet import init_mixer
from adasmooth.nncore import Layer, Net, Tensor, init_net, input_gradient, softmax

from conftest import central_diff, grad_close

probs3 = arrays(np.float64, 3, elements=st.floats(0.01, 1.0)).map(lambda v: v / v.sum())


def _linear(w, b):
    return Net((Layer(np.asarray(w, float), np.asarray(b, float), "linear"),))


# -- formulas -------------------------------------------------------------------------------
def test_smo1_examples():
    g, h = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.array_equal(mix_smo1(g, h, np.array([2.0, 2.0]), 0.0), g)
    assert np.array_equal(mix_smo1(g, h, np.array([2.0, 2.0]), 1.0), [1.0, 2.0])


def test_smo1_missing_gradients():
    with pytest.raises(ValueError):
        mix_smo1(np.zeros(2), np.zeros(2), None, 1.0)


def test_smo2_examples():
    g, h = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.array_equal(mix_smo2(g, h, np.array([1.0, 1.0]), 0.0), g)
    assert np.allclose(mix_smo2(g, h, np.array([1.0, 1.0]), 1.0), [0.5, 0.5], rtol=0, atol=1e-15)
    assert np.allclose(mix_smo2(g, h, np.array([0.7, 3.0]), 1e9), h, rtol=0, atol=1e-6)


def test_smo3_examples():
    g, h = np.array([0.6, 0.4]), np.array([0.2, 0.8])
    assert np.array_equal(mix_smo3(g, h, np.zeros(2), 5.0), g)
    assert np.allclose(mix_smo3(g, h, np.full(2, 2.0), 1.0), [1 / 3, 2 / 3], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        mix_smo3(g, h, np.array([-1.0, 1.0]), 1.0)


def test_smo3_infinite_gamma_limit():
    g, h = np.array([0.6, 0.4]), np.array([0.2, 0.8])
    assert np.array_equal(mix_smo3(g, h, np.array([1.0, 0.0]), np.inf), [0.2, 0.4])


@given(g=probs3, h=probs3, n=arrays(np.float64, 3, elements=st.floats(0, 10)),
       gamma=st.floats(0, 100))
def test_smo_rules_match_scalar_reevaluation(g, h, n, gamma):
    s1 = [g[i] + gamma * h[i] * n[i] for i in range(3)]
    s2 = [(g[i] + gamma * h[i] * n[i]) / (1 + gamma * n[i]) for i in range(3)]
    assert np.allclose(mix_smo1(g, h, n, gamma), s1, rtol=1e-12, atol=1e-15)
    assert np.allclose(mix_smo2(g, h, n, gamma), s2, rtol=1e-12, atol=1e-15)
    assert np.allclose(mix_smo3(g, h, n, gamma), s2, rtol=1e-12, atol=1e-15)


def test_final_example():
    g, h = np.array([0.7, 0.2, 0.1]), np.array([0.1, 0.8, 0.1])
    out = mix_final(g, h, 0.5)
    assert np.allclose(np.exp(out), [0.4, 0.5, 0.1], rtol=0, atol=1e-15)
    assert out.argmax() == 1  # the second class


def test_final_endpoints():
    g, h = np.array([0.7, 0.2, 0.1]), np.array([0.1, 0.8, 0.1])
    assert mix_final(g, h, 0.0).argmax() == g.argmax()
    assert np.array_equal(mix_final(g, h, 1.0), np.log(h))


def test_final_hardmax_zero_is_floored():
    out = mix_final(np.array([1.0, 0.0, 0.0]), np.array([0.2, 0.5, 0.3]), 0.0)
    assert np.all(np.isfinite(out)) and out.argmax() == 0


def test_final_rejects_bad_alpha():
    with pytest.raises(ConfigError):
        mix_final(np.array([0.5, 0.5]), np.array([0.5, 0.5]), 1.5)


@given(g=probs3, h=probs3, a=st.floats(0, 1))
def test_final_output_is_log_probability(g, h, a):
    p = np.exp(mix_final(g, h, a))
    assert np.all((p >= 0) & (p <= 1)) and abs(p.sum() - 1) < 1e-9


@given(g=probs3, h=probs3, a=st.floats(0, 1))
def test_smo3_unit_trust_reproduces_final(g, h, a):
    assume(a < 1)
    gamma = gamma_from_alpha(a)
    assert np.allclose(mix_smo3(g, h, np.ones(3), gamma), np.exp(mix_final(g, h, a)), rtol=1e-12, atol=1e-15)


@given(g=probs3, h=probs3, a=st.floats(0, 1), y=st.integers(0, 2), i=st.integers(0, 2))
def test_order_preservation(g, h, a, y, i):
    assume(g[y] >= g[i] and h[y] >= h[i])
    out = mix_final(g, h, a)
    assert out[y] >= out[i]


@given(a=st.floats(0, 0.999))
def test_alpha_gamma_roundtrip(a):
    assert abs(alpha_from_gamma(gamma_from_alpha(a)) - a) < 1e-12


# -- config ---------------------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ConfigError):
        MixConfig(alpha=1.2)
    with pytest.raises(ConfigError):
        MixConfig(variant="final", space="logits")
    with pytest.raises(ConfigError):
        MixConfig(variant="smo3", gamma=-1.0)
    with pytest.raises(ConfigError):
        MixConfig(s_h=1.5)
    with pytest.raises(ConfigError):
        MixConfig(variant="smo9")
    assert MixConfig(variant="smo3", space="logits", gamma=3.0).alpha == 0.75


# -- mixed classifier -----------------------------------------------------------------------
@pytest.fixture
def bases(rng):
    return init_net([3, 6, 5, 3], rng), init_net([3, 6, 5, 3], rng, activation="tanh")


def test_grad_ratio_trust_factors_through_the_classifier():
    # Logit gradients have l1 norm 2 for g and 1 for h; at x = 0 the outputs are (0.6, 0.4), (0.2, 0.8).
    g = _linear([[2.0, 0.0], [0.0, -2.0]], [0.6, 0.4])
    h = _linear([[0.5, 0.5], [-1.0, 0.0]], [0.2, 0.8])
    cfg = MixConfig("smo3", gamma=1.0, r_option="grad_ratio", space="logits", norm="linf")
    mc = MixedClassifier(g, h, cfg)
    assert np.allclose(trust_factors(cfg, g, h, np.zeros((1, 2))), 2.0)
    assert np.allclose(mixed_forward(mc, np.zeros(2)), [1 / 3, 2 / 3], rtol=0, atol=1e-15)


def test_grad_max_uses_top_class_norm():
    g = _linear([[2.0, 0.0], [0.0, -3.0]], [1.0, 0.0])
    cfg = MixConfig("smo3", gamma=1.0, r_option="grad_max", space="logits")
    assert np.allclose(trust_factors(cfg, g, g, np.zeros((1, 2))), [[2.0, 2.0]])


def test_identical_bases_make_alpha_irrelevant(bases, rng):
    g, _ = bases
    x = rng.normal(size=(4, 3))
    outs = [mixed_forward(MixedClassifier(g, g, MixConfig(alpha=a)), x) for a in (0.0, 0.3, 1.0)]
    assert all(np.allclose(o, outs[0], atol=1e-12) for o in outs)


def test_temperature_multiplies_logits(rng):
    g = init_net([3, 4, 2], rng)
    last = g.layers[-1]
    g2 = Net(g.layers[:-1] + (replace(last, weight=2 * last.weight, bias=2 * last.bias),))
    x = rng.normal(size=(5, 3))
    a = mixed_forward(MixedClassifier(g, g, MixConfig(alpha=0.0, s_g=2.0)), x)
    b = mixed_forward(MixedClassifier(g2, g2, MixConfig(alpha=0.0)), x)
    assert np.allclose(a, b, atol=1e-12)


def test_hardmax_g_uses_one_hot(bases, rng):
    g, h = bases
    x = rng.normal(size=(6, 3))
    out = np.exp(mixed_forward(MixedClassifier(g, h, MixConfig(alpha=0.5, hardmax_g=True)), x))
    onehot = np.eye(3)[g(x).argmax(axis=1)]
    assert np.allclose(out, 0.5 * onehot + 0.5 * softmax(h(x)), atol=1e-12)


def test_endpoint_argmax(bases, rng):
    g, h = bases
    x = rng.normal(size=(20, 3))
    assert np.array_equal(MixedClassifier(g, h, MixConfig(alpha=0.0)).predict(x), g(x).argmax(axis=1))
    assert np.array_equal(MixedClassifier(g, h, MixConfig(alpha=1.0)).predict(x), h(x).argmax(axis=1))


def test_mismatched_bases_rejected(rng):
    with pytest.raises(ShapeError):
        MixedClassifier(init_net([3, 4, 2], rng), init_net([2, 4, 2], rng))


def _constant_mixer(g, h, alpha0):
    mn = init_mixer(g, h, np.random.default_rng(0), hidden=(4,))
    params = [np.zeros_like(p) for p in mn.params()]
    params[-1] = np.array([np.log(alpha0 / (1 - alpha0)) / mn.scale])
    return mn.with_params(params)


def test_constant_mixing_network_equals_fixed_alpha(bases, rng):
    g, h = bases
    x = rng.normal(size=(5, 3))
    mc = MixedClassifier(g, h, MixConfig(), _constant_mixer(g, h, 0.3))
    assert np.allclose(mc.alpha(x), 0.3, atol=1e-12)
    assert np.allclose(mixed_forward(mc, x), mixed_forward(mc.with_alpha(0.3), x), atol=1e-12)


def test_mixer_requires_final_variant(bases):
    g, h = bases
    with pytest.raises(ConfigError):
        MixedClassifier(g, h, MixConfig("smo3", space="logits"), _constant_mixer(g, h, 0.5))


@pytest.mark.parametrize("cfg", [
    MixConfig(alpha=0.4),
    MixConfig(alpha=0.4, s_g=2.0, s_h=0.5),
    MixConfig("smo1", alpha=0.4, space="logits"),
    MixConfig("smo2", alpha=0.4, space="probabilities"),
    MixConfig("smo3", alpha=0.4, space="logits", r_option="grad_ratio"),
])
def test_mixed_input_gradient_matches_finite_differences(cfg, rng):
    g = init_net([3, 6, 5, 3], rng, activation="tanh")
    h = init_net([3, 6, 5, 3], rng, activation="tanh")
    mc = MixedClassifier(g, h, cfg)
    x, y = rng.normal(size=3), 1
    f = lambda z: float(-np.log(softmax(mixed_forward(mc, z))[y]))
    if cfg.variant == "final":
        assert grad_close(input_gradient(mc, x, y), central_diff(f, x))
        return
    # Trust factors are held fixed when differentiating, so compare with R frozen at x.
    r = trust_factors(cfg, g, h, x[None])
    frozen = lambda z: float(-np.log(softmax(_mixed_with_r(mc, z, r))[y]))
    assert grad_close(input_gradient(mc, x, y), central_diff(frozen, x))


def _mixed_with_r(mc, z, r):
    cfg = mc.config
    go, ho = mc.g(z[None]) * cfg.s_g, mc.h(z[None]) * cfg.s_h
    if cfg.space == "probabilities":
        go, ho = softmax(go), softmax(ho)
    rule = mix_smo1 if cfg.variant == "smo1" else mix_smo3
    out = rule(go, ho, r, cfg.gamma_value)[0]
    return np.log(out) if cfg.space == "probabilities" else out


def test_mixed_gradient_through_mixing_network(bases, rng):
    g = init_net([3, 6, 5, 3], rng, activation="tanh")
    h = init_net([3, 6, 5, 3], rng, activation="tanh")
    mn = init_mixer(g, h, rng, hidden=(4,), alpha_min=0.2, alpha_max=0.9, shift=0.3)
    mc = MixedClassifier(g, h, MixConfig(), mn)
    x, y = rng.normal(size=3), 2
    f = lambda z: float(-np.log(softmax(mixed_forward(mc, z))[y]))
    assert grad_close(input_gradient(mc, x, y), central_diff(f, x))
