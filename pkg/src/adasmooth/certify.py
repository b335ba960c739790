"""Certified radii for mixed classifiers, smoothed models, and margin estimates.

A mixed classifier with weight alpha in [1/2, 1] keeps h's prediction at
every point where h's top-two probability gap is at least (1 - alpha) / alpha.
Two ways of turning that into a radius are provided: per-class Lipschitz
constants of h's probabilities, and Gaussian smoothing of a base network.
A radius of 0 means no certificate.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import CertificationError, ConfigError, ShapeError
from .nncore import autodiff as ad
from .nncore.autodiff import Tensor
from .nncore.grad import model_outputs
from .nncore.losses import prob_margin, softmax, top_two_gap

PROB_CLAMP = 1e-12
PROVENANCES = ("analytic", "estimated-local")
METHODS = ("lipschitz", "rs")

_STD_NORMAL = NormalDist()
# Largest l2 norm of p_i * (e_i - p) over the simplex: sqrt(2) * max p (1 - p).
SOFTMAX_COORD_LIP = np.sqrt(2.0) / 4.0


def ndtri(p):
    """Inverse standard normal CDF, elementwise.

    Delegates to :meth:`statistics.NormalDist.inv_cdf`, a rational
    approximation with relative error near 1e-16 over (0, 1).
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any((arr <= 0) | (arr >= 1)):
        raise ValueError("ndtri needs probabilities strictly inside (0, 1)")
    out = np.vectorize(_STD_NORMAL.inv_cdf, otypes=[np.float64])(arr)
    return out if out.ndim else float(out)


def _check_alpha(alpha: float) -> None:
    if not 0.5 <= alpha <= 1.0:
        raise CertificationError(f"certificates need alpha in [0.5, 1], got {alpha}")


def required_margin(alpha: float) -> float:
    """Probability gap h must keep for the alpha-mixture to follow h."""
    _check_alpha(alpha)
    return (1.0 - alpha) / alpha


@dataclass(frozen=True)
class LipschitzProfile:
    """Per-class Lipschitz constants of h's probabilities under ``norm``."""

    constants: np.ndarray
    norm: str = "l2"
    provenance: str = "analytic"

    def __post_init__(self):
        c = np.asarray(self.constants, dtype=np.float64).reshape(-1)
        if c.size < 2 or not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise CertificationError("Lipschitz constants must be positive and finite")
        if self.norm not in ("l2", "linf"):
            raise ConfigError("norm must be 'l2' or 'linf'")
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "constants", c)


def lipschitz_radius(h_probs, lips: LipschitzProfile, alpha: float, y=None):
    """min over i != y of (alpha (p_y - p_i) + alpha - 1) / (alpha (L_y + L_i)), floored at 0.

    ``y`` defaults to h's predicted class. Works on one vector or a batch.
    """
    _check_alpha(alpha)
    p = np.asarray(h_probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[1] != lips.constants.size:
        raise ShapeError("profile has a different class count")
    rows = np.arange(len(p))
    y = p.argmax(axis=1) if y is None else np.broadcast_to(np.asarray(y, dtype=np.int64), (len(p),))
    num = alpha * (p[rows, y][:, None] - p) + alpha - 1.0
    den = alpha * (lips.constants[y][:, None] + lips.constants[None, :])
    ratio = num / den
    ratio[rows, y] = np.inf
    r = np.maximum(ratio.min(axis=1), 0.0)
    return float(r[0]) if single else r


def rs_radius(h_probs, sigma: float, alpha: float):
    """(sigma / 2) (ndtri(alpha p_y) - ndtri(alpha p_y' + 1 - alpha)), floored at 0.

    y is the top class and y' the runner-up; arguments are clamped into
    (1e-12, 1 - 1e-12) before the inverse CDF.
    """
    _check_alpha(alpha)
    if not sigma > 0:
        raise ConfigError("sigma must be > 0")
    p = np.asarray(h_probs, dtype=np.float64)
    single = p.ndim == 1
    s = np.sort(np.atleast_2d(p), axis=1)
    a = np.clip(alpha * s[:, -1], PROB_CLAMP, 1 - PROB_CLAMP)
    b = np.clip(alpha * s[:, -2] + (1.0 - alpha), PROB_CLAMP, 1 - PROB_CLAMP)
    r = np.maximum(0.5 * sigma * (np.atleast_1d(ndtri(a)) - np.atleast_1d(ndtri(b))), 0.0)
    return float(r[0]) if single else r


def rs_lipschitz_constant(sigma: float) -> float:
    """l2 Lipschitz constant of every Gaussian-smoothed probability."""
    return float(np.sqrt(2.0 / (np.pi * sigma * sigma)))


def analytic_profile(net, norm: str = "l2", scale: float = 1.0) -> LipschitzProfile:
    """Sound global bound for softmax(scale * net(x)) of an MLP with 1-Lipschitz activations.

    Logit bound: spectral norms of the later layers times the first layer's
    operator norm from the input norm into l2; each softmax coordinate adds
    a factor sqrt(2) / 4.
    """
    ws = [layer.weight for layer in net.layers]
    if norm == "l2":
        first = np.linalg.norm(ws[0], 2)
    elif norm == "linf":
        # ||W d||_2 <= || row-wise l1 norms ||_2 * ||d||_inf
        first = np.linalg.norm(np.abs(ws[0]).sum(axis=1))
    else:
        raise ConfigError("norm must be 'l2' or 'linf'")
    bound = first * np.prod([np.linalg.norm(w, 2) for w in ws[1:]]) * scale * SOFTMAX_COORD_LIP
    return LipschitzProfile(np.full(net.n_classes, bound), norm, "analytic")


# -- Gaussian smoothing ------------------------------------------------------------------
def _input_seed(seed: int, x: np.ndarray) -> np.random.SeedSequence:
    digest = hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).digest()
    return np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")])


class RsModel:
    """x -> E[softmax(base(x + xi))], xi ~ N(0, sigma^2 I), as a differentiable classifier.

    ``method="quadrature"`` uses a tensor-product Gauss-Hermite rule (inputs
    of dimension <= 2 only) and is accurate enough to treat as exact.
    ``method="mc"`` averages ``n_samples`` draws; the differentiable path
    uses one fixed bank of ``bank_size`` draws, while :func:`rs_predict`
    draws fresh noise seeded by the input itself.
    Logits are the log of the smoothed probabilities.
    """

    def __init__(self, base, sigma: float, n_samples: int = 10_000, seed: int = 0,
                 method: str = "mc", nodes: int = 24, bank_size: int = 512, chunk: int = 200_000):
        if not sigma > 0:
            raise ConfigError("sigma must be > 0")
        if n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if method not in ("mc", "quadrature"):
            raise ConfigError(f"unknown smoothing method {method!r}")
        if method == "quadrature" and base.in_dim > 2:
            raise ConfigError("quadrature smoothing supports input dimension <= 2")
        self.base, self.sigma, self.n_samples, self.seed = base, float(sigma), int(n_samples), int(seed)
        self.method, self.chunk = method, int(chunk)
        d = base.in_dim
        if method == "quadrature":
            t, w = np.polynomial.hermite.hermgauss(nodes)
            grids = np.meshgrid(*([t] * d), indexing="ij")
            wgrid = np.meshgrid(*([w] * d), indexing="ij")
            self._offsets = np.sqrt(2.0) * self.sigma * np.stack([g.ravel() for g in grids], axis=1)
            self._weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1) / np.pi ** (d / 2)
        else:
            rng = np.random.default_rng([self.seed, 0x5EED])
            self._offsets = rng.normal(0.0, self.sigma, size=(bank_size, d))
            self._weights = np.full(bank_size, 1.0 / bank_size)

    @property
    def in_dim(self) -> int:
        return self.base.in_dim

    @property
    def n_classes(self) -> int:
        return self.base.n_classes

    def probs_t(self, x: Tensor) -> Tensor:
        n, d = x.shape
        k = len(self._offsets)
        pts = ad.reshape(ad.reshape(x, (n, 1, d)) + self._offsets[None], (n * k, d))
        p = ad.softmax(self.base.logits_t(pts))
        return (ad.reshape(p, (n, k, self.n_classes)) * self._weights[None, :, None]).sum(axis=1)

    def apply(self, x: Tensor, params=None):
        return self.logits_t(x), []

    def logits_t(self, x: Tensor) -> Tensor:
        rows = max(1, self.chunk // len(self._offsets))
        if x.shape[0] <= rows or x.requires_grad:
            return ad.log(ad.maximum(self.probs_t(x), 1e-300))
        parts = [self.probs_t(Tensor(x.data[i:i + rows])).data for i in range(0, x.shape[0], rows)]
        return Tensor(np.log(np.maximum(np.concatenate(parts), 1e-300)))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = self.logits_t(Tensor(np.atleast_2d(x))).data
        return out[0] if x.ndim == 1 else out


def rs_predict(rs: RsModel, x) -> np.ndarray:
    """Smoothed probabilities; Monte Carlo draws are seeded by each input's bytes."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if rs.method == "quadrature":
        out = softmax(rs.logits_t(Tensor(xb)).data)
    else:
        out = np.zeros((len(xb), rs.n_classes))
        per = max(1, rs.chunk // max(1, rs.in_dim))
        for j, row in enumerate(xb):
            rng = np.random.default_rng(_input_seed(rs.seed, row))
            total = np.zeros(rs.n_classes)
            left = rs.n_samples
            while left:
                m = min(left, per)
                noisy = row + rng.normal(0.0, rs.sigma, size=(m, rs.in_dim))
                total += softmax(rs.base.logits_t(Tensor(noisy)).data).sum(axis=0)
                left -= m
            out[j] = total / rs.n_samples
    return out[0] if single else out


# -- empirical quantities ------------------------------------------------------------------
def empirical_margin(model, x, y, spec, domain=None, seed: int = 0) -> np.ndarray:
    """Smallest probability gap p_y - max_{i != y} p_i over the attack's iterates.

    The first restart starts at x, so the value never exceeds the clean gap.
    Negative values mean the attack found a misclassified point.
    """
    from .attacks import pgd

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return pgd(model, x, y, spec, domain, seed).margin


def _probs(model, x: np.ndarray) -> np.ndarray:
    logits, _ = model_outputs(model, Tensor(x), alpha_grad=False)
    return softmax(logits.data)


def class_deviation(model, x: np.ndarray, cls: np.ndarray, sign: float, spec, domain=None,
                    seed: int = 0) -> np.ndarray:
    """max over the ball of sign * (p_cls(x + d) - p_cls(x)), solved by projected ascent."""
    from .attacks import _box, _random_start, ascend

    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cls = np.broadcast_to(np.asarray(cls, dtype=np.int64), (len(x),))
    rows = np.arange(len(x))
    base = _probs(model, x)[rows, cls]
    lo, hi = _box(x, domain)

    def grad_and_score(z):
        zt = Tensor(z, requires_grad=True)
        logits, _ = model_outputs(model, zt, alpha_grad=True)
        p = ad.softmax(logits)
        onehot = np.zeros(p.shape)
        onehot[rows, cls] = sign
        obj = (p * onehot).sum(axis=1)
        obj.sum().backward()
        g = zt.grad if zt.grad is not None else np.zeros_like(z)
        return g, -obj.data

    rng = np.random.default_rng(seed)
    best = np.full(len(x), -np.inf)
    for r in range(spec.restarts):
        start = x if r == 0 else _random_start(x, spec.eps, spec.norm, rng)
        _, s, _ = ascend(grad_and_score, x, start, spec.eps, spec.norm, spec.steps, spec.eta, lo, hi)
        best = np.maximum(best, -s)
    return best - sign * base


def local_lipschitz_estimate(model, x, eps: float, spec, domain=None, seed: int = 0) -> np.ndarray:
    """Per-input probability-space local Lipschitz estimate averaged over classes.

    (largest drop of p_y + sum over i != y of the largest rise of p_i) / (c eps),
    with y the predicted class and every maximum found by its own ascent run.
    """
    from dataclasses import replace

    if not eps > 0:
        raise ConfigError("eps must be > 0")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    spec = replace(spec, eps=eps)
    probs = _probs(model, x)
    c = probs.shape[1]
    y = probs.argmax(axis=1)
    total = class_deviation(model, x, y, -1.0, spec, domain, seed)
    for k in range(1, c):
        total = total + class_deviation(model, x, (y + k) % c, 1.0, spec, domain, seed + k)
    return total / (c * eps)


# -- certificates for mixed classifiers ---------------------------------------------------
@dataclass
class CertResult:
    """Per-input certificates; ``radius == 0`` means none was issued."""

    index: np.ndarray
    clean_pred: np.ndarray
    h_pred: np.ndarray
    margin: np.ndarray
    method: str
    radius: np.ndarray
    alpha: float
    norm: str

    @property
    def certified(self) -> np.ndarray:
        return self.radius > 0

    def rows(self):
        for i, c, h, m, r in zip(self.index, self.clean_pred, self.h_pred, self.margin, self.radius):
            yield int(i), int(c), int(h), float(m), self.method, float(r)


def certification_alpha(mc) -> float:
    """Weight certificates are computed at: alpha_min for a mixing network, else the fixed alpha."""
    if mc.mixer is not None:
        return float(mc.mixer.alpha_min)
    return float(mc.config.alpha)


def h_probabilities(mc, x: np.ndarray) -> np.ndarray:
    """Probabilities of the robust base exactly as they enter the mixture."""
    logits = mc.h.logits_t(Tensor(np.atleast_2d(x))).data * mc.config.s_h
    return softmax(logits)


def certify_mixed(mc, x, y, method: str, profile: LipschitzProfile | None = None,
                  alpha: float | None = None, norm: str | None = None) -> CertResult:
    """Radii within which the mixed prediction provably equals h's clean prediction.

    No certificate is issued where h's prediction differs from the label.
    ``rs`` needs the robust base to be an :class:`RsModel` (l2 radii);
    ``lipschitz`` needs a profile whose norm matches ``norm``.
    """
    from .mixing import mixed_forward

    if method not in METHODS:
        raise ConfigError(f"unknown certification method {method!r}")
    alpha = certification_alpha(mc) if alpha is None else float(alpha)
    _check_alpha(alpha)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if method == "rs":
        if not isinstance(mc.h, RsModel):
            raise CertificationError("the rs method needs a smoothed robust base")
        if mc.config.s_h != 1.0:
            raise CertificationError("the rs method needs s_h = 1")
        norm = norm or "l2"
        if norm != "l2":
            raise CertificationError("smoothing certificates are l2 radii")
        probs = rs_predict(mc.h, x)
        radius = rs_radius(probs, mc.h.sigma, alpha)
    else:
        if profile is None:
            raise CertificationError("the lipschitz method needs a profile")
        norm = norm or profile.norm
        if profile.norm != norm:
            raise CertificationError(f"profile is for {profile.norm}, certificate requested in {norm}")
        probs = h_probabilities(mc, x)
        radius = lipschitz_radius(probs, profile, alpha)
    radius = np.atleast_1d(radius)
    h_pred = probs.argmax(axis=1)
    radius = np.where(h_pred == y, radius, 0.0)
    clean = mixed_forward(mc.with_alpha(alpha) if mc.mixer is None else mc, x).argmax(axis=1)
    return CertResult(np.arange(len(x)), clean, h_pred, top_two_gap(probs), method, radius, alpha, norm)


def certified_accuracy(cert: CertResult, y, radii) -> np.ndarray:
    """Fraction correct with radius >= r for each r; r = 0 is the clean accuracy."""
    y = np.asarray(y, dtype=np.int64)
    correct = cert.clean_pred == y
    out = []
    for r in np.atleast_1d(radii):
        ok = correct if r <= 0 else correct & (cert.radius >= r)
        out.append(float(ok.mean()) if len(ok) else float("nan"))
    return np.array(out)


def margin_of(model, x, y) -> np.ndarray:
    return prob_margin(_probs(model, np.atleast_2d(x)), y)
