import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from adasmooth.attacks import AttackSpec
from adasmooth.certify import (LipschitzProfile, RsModel, certified_accuracy, certify_mixed,
                               empirical_margin, lipschitz_radius, local_lipschitz_estimate, ndtri,
                               required_margin, rs_lipschitz_constant, rs_predict, rs_radius)
from adasmooth.errors import CertificationError, ConfigError
from adasmooth.mixing import MixConfig, MixedClassifier
from adasmooth.nncore import Layer, Net, init_net, softmax
from adasmooth.nncore.losses import top_two_gap

mpmath.mp.dps = 40


def mp_ndtri(p):
    return float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))


def unit_profile(c):
    return LipschitzProfile(np.ones(c))


def linear_net(w, b):
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    return Net((Layer(w, np.asarray(b, dtype=np.float64), "linear"),), capture=())


# -- required margin ------------------------------------------------------------------------
@pytest.mark.parametrize("alpha,mu", [(1.0, 0.0), (0.5, 1.0), (2 / 3, 0.5)])
def test_required_margin_examples(alpha, mu):
    assert required_margin(alpha) == pytest.approx(mu, abs=1e-15)


def test_required_margin_needs_alpha_above_half():
    with pytest.raises(CertificationError):
        required_margin(0.49)


# -- Lipschitz radius -----------------------------------------------------------------------
def test_lipschitz_radius_alpha_one():
    assert lipschitz_radius([0.9, 0.1], unit_profile(2), 1.0) == pytest.approx(0.4, abs=1e-12)


def test_lipschitz_radius_three_class_example():
    a = mpmath.mpf(3) / 4
    want = float((a * (mpmath.mpf("0.9") - mpmath.mpf("0.05")) + a - 1) / (a * 2))
    got = lipschitz_radius([0.9, 0.05, 0.05], unit_profile(3), 0.75)
    assert abs(got - want) <= 1e-9
    assert abs(got - 0.2583333333333333) <= 1e-9


def test_lipschitz_radius_example_survives_brute_force():
    # A 1-Lipschitz piecewise-linear h whose probability moves from class 0 to
    # class 1 along one direction, mixed with the worst possible g (all mass on
    # class 1). No point inside the radius flips; just past it, one does.
    alpha, r = 0.75, lipschitz_radius([0.9, 0.05, 0.05], unit_profile(3), 0.75)

    def mixed_pred(delta):
        u = np.clip(delta @ np.array([0.6, 0.8]), -0.05, 0.85)
        p = np.stack([0.9 - u, 0.05 + u, np.full_like(u, 0.05)], axis=-1)
        return ((1 - alpha) * np.array([0, 1, 0]) + alpha * p).argmax(axis=-1)

    ang = np.linspace(0, 2 * np.pi, 721)
    rad = np.linspace(0, 1, 201)
    pts = (rad[:, None, None] * np.stack([np.cos(ang), np.sin(ang)], axis=-1)[None]).reshape(-1, 2)
    assert np.all(mixed_pred(0.99 * r * pts) == 0)
    assert np.any(mixed_pred(1.01 * r * pts) != 0)


def test_lipschitz_radius_zero_below_threshold():
    # gap 0.2: alpha <= 1 / 1.2 leaves no certificate, anything above does
    p = np.array([0.6, 0.4])
    for alpha in (0.5, 0.7, 1 / 1.2):
        assert lipschitz_radius(p, unit_profile(2), alpha) == 0.0
    assert lipschitz_radius(p, unit_profile(2), 0.85) > 0.0


def test_lipschitz_profile_validation():
    with pytest.raises(CertificationError):
        LipschitzProfile(np.array([1.0, 0.0]))
    with pytest.raises(CertificationError):
        LipschitzProfile(np.array([1.0, np.inf]))


# -- smoothing radius -----------------------------------------------------------------------
# The second value is often quoted as 0.5071; the high-precision value is 0.507233.
@pytest.mark.parametrize("alpha,a,b,approx", [(1.0, 0.9, 0.05, 1.4632), (0.75, 0.675, 0.2875, 0.5072)])
def test_rs_radius_examples(alpha, a, b, approx):
    want = 0.5 * (mp_ndtri(a) - mp_ndtri(b))
    got = rs_radius([0.9, 0.05, 0.05], 1.0, alpha)
    assert abs(got - want) <= 1e-9
    assert abs(got - approx) < 5e-5


def test_rs_radius_tie_is_zero():
    assert rs_radius([0.45, 0.45, 0.1], 1.0, 1.0) == 0.0


def test_rs_radius_clamps_saturated_probabilities():
    r = rs_radius([1.0, 0.0], 0.5, 1.0)
    assert np.isfinite(r) and r > 0


@given(p=st.floats(0.01, 0.99), q=st.floats(0.0, 1.0), sigma=st.floats(0.05, 3.0))
def test_rs_radius_alpha_one_is_classical(p, q, sigma):
    probs = [p, (1 - p) * q, (1 - p) * (1 - q)]
    runner, top = np.clip(sorted(probs)[-2:], 1e-12, 1 - 1e-12)
    want = max(0.5 * sigma * (ndtri(top) - ndtri(runner)), 0.0)
    got = rs_radius(probs, sigma, 1.0)
    assert got == pytest.approx(want, rel=1e-14, abs=1e-15)


def test_ndtri_matches_high_precision():
    ps = np.concatenate([np.geomspace(1e-6, 0.5, 400), 1 - np.geomspace(1e-6, 0.5, 400)[::-1]])
    errs = [abs(ndtri(p) - mp_ndtri(p)) for p in ps]
    assert max(errs) <= 1e-9


@given(st.floats(1e-6, 1 - 1e-6))
def test_ndtri_property(p):
    assert abs(ndtri(p) - mp_ndtri(p)) <= 1e-9


def test_ndtri_rejects_endpoints():
    with pytest.raises(ValueError):
        ndtri(0.0)


@given(p=st.lists(st.floats(0.001, 1.0), min_size=2, max_size=5),
       a1=st.floats(0.5, 1.0), a2=st.floats(0.5, 1.0), lip=st.floats(0.1, 5.0))
def test_radii_nondecreasing_in_alpha(p, a1, a2, lip):
    probs = np.asarray(p) / np.sum(p)
    lo, hi = min(a1, a2), max(a1, a2)
    prof = LipschitzProfile(np.full(len(p), lip))
    assert lipschitz_radius(probs, prof, lo) <= lipschitz_radius(probs, prof, hi) + 1e-12
    assert rs_radius(probs, 0.5, lo) <= rs_radius(probs, 0.5, hi) + 1e-12


def test_rs_lipschitz_constant():
    assert rs_lipschitz_constant(0.5) == pytest.approx(np.sqrt(2 / (np.pi * 0.25)), rel=1e-15)


# -- smoothed prediction --------------------------------------------------------------------
def test_rs_predict_constant_base():
    base = linear_net(np.zeros((3, 2)), [0.3, -0.2, 1.0])
    for sigma, n in ((0.1, 10), (2.0, 500)):
        out = rs_predict(RsModel(base, sigma, n_samples=n), np.array([[0.5, -1.0], [3.0, 2.0]]))
        assert np.allclose(out, softmax([0.3, -0.2, 1.0]), atol=1e-15)


def test_rs_predict_tiny_sigma_matches_base(rng):
    base = init_net([2, 8, 3], rng, activation="tanh")
    x = rng.normal(size=(4, 2))
    out = rs_predict(RsModel(base, 1e-8, n_samples=200), x)
    assert np.max(np.abs(out - softmax(base(x)))) <= 1e-6


def test_rs_predict_linear_base_matches_quadrature():
    w, b, sigma, x0 = 2.0, 0.3, 0.7, 0.2
    base = linear_net([[w], [0.0]], [b, 0.0])
    n = 10_000
    mc = rs_predict(RsModel(base, sigma, n_samples=n, seed=3), np.array([x0]))
    f = lambda t: mpmath.npdf(t, 0, sigma) / (1 + mpmath.exp(-(w * (x0 + t) + b)))
    exact = float(mpmath.quad(f, [-mpmath.inf, 0, mpmath.inf]))
    se = np.sqrt(exact * (1 - exact) / n)
    assert abs(mc[0] - exact) <= 3 * se
    quad = rs_predict(RsModel(base, sigma, method="quadrature", nodes=40), np.array([x0]))
    assert abs(quad[0] - exact) <= 1e-8


def test_rs_predict_seeded_per_input(rng):
    base = init_net([2, 6, 2], rng)
    rs = RsModel(base, 0.5, n_samples=300, seed=1)
    x = rng.normal(size=(3, 2))
    assert np.array_equal(rs_predict(rs, x)[::-1], rs_predict(rs, x[::-1]))
    assert np.array_equal(rs_predict(rs, x[1]), rs_predict(rs, x)[1])


def test_rs_model_validation(rng):
    base = init_net([3, 4, 2], rng)
    with pytest.raises(ConfigError):
        RsModel(base, 0.0)
    with pytest.raises(ConfigError):
        RsModel(base, 1.0, n_samples=0)
    with pytest.raises(ConfigError):
        RsModel(base, 1.0, method="quadrature")


# -- empirical margin and local Lipschitz estimate -----------------------------------------
def test_empirical_margin_zero_radius_is_clean_gap(rng):
    net = init_net([2, 8, 3], rng)
    x = rng.normal(size=(5, 2))
    y = net(x).argmax(axis=1)
    mu = empirical_margin(net, x, y, AttackSpec("linf", 0.0, 10))
    assert np.allclose(mu, top_two_gap(softmax(net(x))), atol=1e-15)


@given(seed=st.integers(0, 10_000), eps=st.floats(0.0, 1.0))
def test_empirical_margin_never_exceeds_clean_gap(seed, eps):
    r = np.random.default_rng(seed)
    net = init_net([2, 6, 3], r)
    x = r.normal(size=(4, 2))
    y = net(x).argmax(axis=1)
    mu = empirical_margin(net, x, y, AttackSpec("l2", eps, 5, restarts=2), seed=seed)
    assert np.all(mu <= top_two_gap(softmax(net(x))) + 1e-12)


def test_local_lipschitz_constant_model_is_zero():
    net = linear_net(np.zeros((2, 2)), [1.0, -1.0])
    est = local_lipschitz_estimate(net, np.zeros((3, 2)), 0.1, AttackSpec("l2", 0.1, 10))
    assert np.array_equal(est, np.zeros(3))


@pytest.mark.parametrize("w,b,x0,eps", [(3.0, 0.5, 0.1, 0.2), (-1.5, 0.0, 0.7, 0.5), (8.0, -1.0, 0.0, 0.05)])
def test_local_lipschitz_matches_grid_on_logistic(w, b, x0, eps):
    net = linear_net([[w], [0.0]], [b, 0.0])
    est = local_lipschitz_estimate(net, np.array([[x0]]), eps, AttackSpec("linf", eps, 50, restarts=2))[0]
    grid = x0 + np.linspace(-eps, eps, 20001)
    p = softmax(net(grid[:, None]))
    p0 = softmax(net(np.array([[x0]])))[0]
    y = int(p0.argmax())
    oracle = (np.max(p0[y] - p[:, y]) + np.max(p[:, 1 - y] - p0[1 - y])) / (2 * eps)
    assert abs(est - oracle) <= 0.02 * oracle


def test_local_lipschitz_needs_positive_eps():
    with pytest.raises(ConfigError):
        local_lipschitz_estimate(linear_net(np.eye(2), [0, 0]), np.zeros((1, 2)), 0.0,
                                 AttackSpec("l2", 0.1, 5))


# -- certify_mixed --------------------------------------------------------------------------
@pytest.fixture
def toy_pair(rng):
    g = init_net([2, 8, 8, 2], rng)
    h = init_net([2, 8, 8, 2], rng, activation="tanh")
    x = rng.normal(size=(40, 2))
    return g, h, x


def test_certify_alpha_one_equals_h_alone(toy_pair):
    g, h, x = toy_pair
    mc = MixedClassifier(g, h, MixConfig(alpha=1.0))
    probs = softmax(h(x))
    y = probs.argmax(axis=1)
    prof = LipschitzProfile(np.full(2, 2.0))
    cert = certify_mixed(mc, x, y, "lipschitz", prof)
    assert np.allclose(cert.radius, (probs.max(axis=1) - probs.min(axis=1)) / 4.0, atol=1e-15)
    assert np.array_equal(cert.clean_pred, y)


def test_no_certificate_where_h_is_wrong(toy_pair):
    g, h, x = toy_pair
    mc = MixedClassifier(g, h, MixConfig(alpha=0.9))
    wrong = 1 - softmax(h(x)).argmax(axis=1)
    cert = certify_mixed(mc, x, wrong, "lipschitz", unit_profile(2))
    assert not cert.certified.any()
    assert np.array_equal(certified_accuracy(cert, wrong, [0.1, 0.5]), [0.0, 0.0])


def test_certify_argument_errors(toy_pair):
    g, h, x = toy_pair
    mc = MixedClassifier(g, h, MixConfig(alpha=0.8))
    y = np.zeros(len(x), dtype=int)
    with pytest.raises(CertificationError):
        certify_mixed(mc, x, y, "lipschitz")
    with pytest.raises(CertificationError):
        certify_mixed(mc, x, y, "rs")
    with pytest.raises(CertificationError):
        certify_mixed(mc, x, y, "lipschitz", LipschitzProfile(np.ones(2), "linf"), norm="l2")
    with pytest.raises(CertificationError):
        certify_mixed(mc, x, y, "lipschitz", unit_profile(2), alpha=0.4)
    with pytest.raises(ConfigError):
        certify_mixed(mc, x, y, "interval", unit_profile(2))


def test_rs_certificates_dominate_lipschitz_ones(rng):
    base = init_net([2, 8, 2], rng, activation="tanh")
    g = init_net([2, 8, 8, 2], rng)
    x = rng.normal(size=(30, 2))
    for sigma in (0.25, 0.5, 1.0):
        rs = RsModel(base, sigma, method="quadrature", nodes=20)
        mc = MixedClassifier(g, rs, MixConfig(alpha=0.8))
        y = rs_predict(rs, x).argmax(axis=1)
        a = certify_mixed(mc, x, y, "rs")
        b = certify_mixed(mc, x, y, "lipschitz", LipschitzProfile(np.full(2, rs_lipschitz_constant(sigma))))
        assert np.all(a.radius >= b.radius - 1e-12)


def test_certified_accuracy_curve(toy_pair):
    g, h, x = toy_pair
    mc = MixedClassifier(g, h, MixConfig(alpha=1.0))
    y = softmax(h(x)).argmax(axis=1)
    cert = certify_mixed(mc, x, y, "lipschitz", unit_profile(2))
    curve = certified_accuracy(cert, y, [0.0, 0.05, 0.2, 10.0])
    assert curve[0] == 1.0 and curve[-1] == 0.0
    assert np.all(np.diff(curve) <= 0)
