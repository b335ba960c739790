"""Mixing a standard classifier g with a robust classifier h.

Four combination rules are provided. ``smo1``..``smo3`` combine per-class
outputs with a trade-off weight gamma >= 0 and an optional per-class
trust factor R. ``final`` forms the convex combination of the two
probability vectors with weight alpha in [0, 1] and returns its logarithm,
so the result can be fed to softmax and cross-entropy like ordinary logits.
gamma and alpha are related by alpha = gamma / (1 + gamma).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .nncore import autodiff as ad
from .nncore.autodiff import Tensor

VARIANTS = ("smo1", "smo2", "smo3", "final")
R_OPTIONS = ("one", "grad_i", "grad_max", "grad_ratio")
SPACES = ("logits", "probabilities")
LOG_FLOOR = 1e-300


def gamma_from_alpha(alpha: float) -> float:
    return np.inf if alpha >= 1.0 else alpha / (1.0 - alpha)


def alpha_from_gamma(gamma: float) -> float:
    return 1.0 if np.isinf(gamma) else gamma / (1.0 + gamma)


@dataclass(frozen=True)
class MixConfig:
    """How g and h are combined.

    ``alpha`` is the canonical trade-off knob; ``gamma`` may be given instead
    for the smo variants. ``norm`` is the attack norm; gradient-based trust
    factors are measured in its dual (l1 for linf attacks, l2 for l2).
    ``s_g`` and ``s_h`` multiply the base logits before any softmax; ``s_g``
    above 1 sharpens g, ``s_h`` below 1 softens h. ``hardmax_g`` replaces
    g's probabilities by the one-hot vector of its prediction.
    """

    variant: str = "final"
    alpha: float = 0.5
    gamma: float | None = None
    r_option: str = "one"
    space: str = "probabilities"
    hardmax_g: bool = False
    s_g: float = 1.0
    s_h: float = 1.0
    norm: str = "linf"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown mixing variant {self.variant!r}")
        if self.r_option not in R_OPTIONS:
            raise ConfigError(f"unknown R option {self.r_option!r}")
        if self.space not in SPACES:
            raise ConfigError(f"unknown mixing space {self.space!r}")
        if self.gamma is not None:
            if self.variant == "final":
                raise ConfigError("the final variant takes alpha, not gamma")
            if not self.gamma >= 0:
                raise ConfigError("gamma must be >= 0")
            object.__setattr__(self, "alpha", alpha_from_gamma(self.gamma))
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.variant == "final":
            if self.space != "probabilities":
                raise ConfigError("the final variant always mixes probabilities")
            if self.r_option != "one":
                raise ConfigError("the final variant uses R = 1")
        if self.hardmax_g and self.space != "probabilities":
            raise ConfigError("hardmax_g only applies to probability mixing")
        if not self.s_g >= 0:
            raise ConfigError("s_g must be >= 0")
        if not 0.0 < self.s_h <= 1.0:
            raise ConfigError("s_h must lie in (0, 1]")
        if self.norm not in ("linf", "l2"):
            raise ConfigError("norm must be 'linf' or 'l2'")

    @property
    def gamma_value(self) -> float:
        return self.gamma if self.gamma is not None else gamma_from_alpha(self.alpha)

    @property
    def dual_norm(self) -> float:
        return 1.0 if self.norm == "linf" else 2.0


# -- combination rules ---------------------------------------------------------------
def _check_pair(g, h):
    if np.shape(g) != np.shape(h):
        raise ShapeError(f"g output {np.shape(g)} and h output {np.shape(h)} differ")


def _need(norms, name="gradient norms"):
    if norms is None:
        raise ValueError(f"{name} are required for this mixing rule")
    return norms


def mix_smo1(g_out, h_out, grad_norms, gamma: float):
    """g_i + gamma * h_i * ||grad g_i||."""
    _check_pair(g_out, h_out)
    n = _need(grad_norms)
    if np.isinf(gamma):
        # Positive rescaling by 1/gamma leaves the prediction unchanged.
        return h_out * n
    return g_out + h_out * n * gamma


def mix_smo3(g_out, h_out, r, gamma: float):
    """(g_i + gamma R_i h_i) / (1 + gamma R_i); gamma = inf gives the limit."""
    _check_pair(g_out, h_out)
    r = np.asarray(_need(r, "trust factors R"), dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("trust factors R must be >= 0")
    if not np.isinf(gamma):
        return (g_out + h_out * (gamma * r)) / (1.0 + gamma * r)
    zero = (r == 0).astype(np.float64)
    return h_out * (1.0 - zero) + g_out * zero


def mix_smo2(g_out, h_out, grad_norms, gamma: float):
    """(g_i + gamma h_i ||grad g_i||) / (1 + gamma ||grad g_i||)."""
    return mix_smo3(g_out, h_out, _need(grad_norms), gamma)


def mix_final(g_probs, h_probs, alpha: float):
    """log((1 - alpha) g_probs + alpha h_probs), floored before the log."""
    _check_pair(g_probs, h_probs)
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    if not np.all((a >= 0) & (a <= 1)):
        raise ConfigError("alpha must lie in [0, 1]")
    if not isinstance(alpha, Tensor):
        alpha = a
    return _log_floor(g_probs * (1.0 - alpha) + h_probs * alpha)


def _log_floor(v):
    if isinstance(v, Tensor):
        return ad.log(ad.maximum(v, LOG_FLOOR))
    return np.log(np.maximum(v, LOG_FLOOR))


# -- trust factors -------------------------------------------------------------------
def _transform(logits: Tensor, scale: float, space: str, hardmax: bool = False) -> Tensor:
    z = logits * scale
    if space == "logits":
        return z
    if hardmax:
        onehot = np.zeros(z.shape)
        onehot[np.arange(z.shape[0]), z.data.argmax(axis=1)] = 1.0
        return Tensor(onehot)
    return ad.softmax(z)


def class_grad_norms(net, x: np.ndarray, scale: float, space: str, dual: float,
                     hardmax: bool = False) -> np.ndarray:
    """Dual norm of the input gradient of every output, shape (n, c)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.zeros((len(x), net.n_classes))
    for i in range(net.n_classes):
        xt = Tensor(x, requires_grad=True)
        o = _transform(net.logits_t(xt), scale, space, hardmax)
        o[:, i].sum().backward()
        g = xt.grad if xt.grad is not None else np.zeros_like(x)
        out[:, i] = np.linalg.norm(g, ord=dual, axis=1)
    return out


def trust_factors(cfg: MixConfig, g, h, x: np.ndarray) -> np.ndarray | None:
    """R_i(x) per row and class for the configured option (None when R = 1 is implicit)."""
    if cfg.r_option == "one" and cfg.variant in ("smo3", "final"):
        return np.ones((len(x), g.n_classes))
    gn = class_grad_norms(g, x, cfg.s_g, cfg.space, cfg.dual_norm, cfg.hardmax_g)
    if cfg.variant in ("smo1", "smo2"):
        return gn
    if cfg.r_option == "grad_i":
        return gn
    if cfg.r_option == "grad_max":
        top = g(x).argmax(axis=1)
        return np.repeat(gn[np.arange(len(x)), top][:, None], g.n_classes, axis=1)
    if cfg.r_option == "grad_ratio":
        hn = class_grad_norms(h, x, cfg.s_h, cfg.space, cfg.dual_norm)
        return gn / np.maximum(hn, 1e-12)
    return np.ones((len(x), g.n_classes))


# -- mixed classifier ----------------------------------------------------------------
@dataclass(frozen=True)
class MixedClassifier:
    """h^alpha built from bases ``g`` and ``h``; ``mixer`` optionally supplies alpha(x).

    Trust factors that depend on gradients are evaluated at the current input
    and then treated as constants when differentiating the mixed output.
    """

    g: object
    h: object
    config: MixConfig = MixConfig()
    mixer: object | None = None

    def __post_init__(self):
        if self.g.in_dim != self.h.in_dim or self.g.n_classes != self.h.n_classes:
            raise ShapeError("g and h must share input dimension and class count")
        if self.mixer is not None and self.config.variant != "final":
            raise ConfigError("a mixing network requires the final variant")

    @property
    def in_dim(self) -> int:
        return self.g.in_dim

    @property
    def n_classes(self) -> int:
        return self.g.n_classes

    def with_alpha(self, alpha: float) -> "MixedClassifier":
        return replace(self, config=replace(self.config, alpha=alpha, gamma=None), mixer=None)

    def outputs_t(self, x: Tensor, alpha_grad: bool = True) -> tuple[Tensor, Tensor | None]:
        """Mixed logits and, with a mixing network, the per-row alpha."""
        cfg = self.config
        g_logits, g_acts = self.g.apply(x)
        h_logits, h_acts = self.h.apply(x)
        g_out = _transform(g_logits, cfg.s_g, cfg.space, cfg.hardmax_g)
        h_out = _transform(h_logits, cfg.s_h, cfg.space)
        alpha = None
        if self.mixer is not None:
            alpha = self.mixer.alpha_t(g_acts, h_acts)
            a = alpha if alpha_grad else alpha.detach()
            return mix_final(g_out, h_out, ad.reshape(a, (-1, 1))), alpha
        if cfg.variant == "final":
            return mix_final(g_out, h_out, cfg.alpha), None
        r = trust_factors(cfg, self.g, self.h, x.data)
        gamma = cfg.gamma_value
        if cfg.variant == "smo1":
            out = mix_smo1(g_out, h_out, r, gamma)
        else:
            out = mix_smo3(g_out, h_out, r, gamma)
        if cfg.space == "probabilities":
            out = _log_floor(out)
        return out, None

    def logits_t(self, x: Tensor) -> Tensor:
        return self.outputs_t(x)[0]

    def alpha(self, x: np.ndarray) -> np.ndarray:
        """Mixing weight per row (constant without a mixing network)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.mixer is None:
            return np.full(len(x), self.config.alpha)
        _, g_acts = self.g.apply(Tensor(x))
        _, h_acts = self.h.apply(Tensor(x))
        return self.mixer.alpha_t(g_acts, h_acts).data.reshape(-1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mixed_forward(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return mixed_forward(self, np.atleast_2d(x)).argmax(axis=1)


def mixed_forward(mc: MixedClassifier, x) -> np.ndarray:
    """Mixed logits for one input or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != mc.in_dim:
        raise ShapeError(f"input dimension {xb.shape[1]} does not match {mc.in_dim}")
    out = mc.outputs_t(Tensor(xb), alpha_grad=False)[0].data
    return out[0] if single else out


def probabilities(model, x: np.ndarray) -> np.ndarray:
    """Softmax of any classifier's logits on a batch."""
    from .nncore.grad import model_outputs

    logits, _ = model_outputs(model, Tensor(np.atleast_2d(x)), alpha_grad=False)
    return ad._softmax(logits.data)
