"""Input-dependent mixing weight alpha(x) and its training.

The mixing network reads hidden features of both frozen bases: the first
hidden layer of g and h directly, and their second hidden layer through a
learned linear reduction. A small MLP maps the concatenation to one raw
score, which is standardized with running statistics and squashed:

    training:   alpha = sigmoid(s * z)
    evaluation: alpha = a_min + (a_max - a_min) * sigmoid(s * z + shift)

The sigmoid argument is clipped to [-30, 30], so evaluation-mode alpha
stays strictly inside (a_min, a_max).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, NumericalError, ShapeError
from .mixing import MixedClassifier, _transform, mix_final
from .nncore import autodiff as ad
from .nncore.autodiff import Tensor
from .nncore.dataset import Dataset
from .nncore.losses import bce, cross_entropy
from .nncore.net import Layer, Net, init_net, net_from_dict, net_to_dict
from .nncore.optim import AdamW

ARG_CLIP = 30.0
BN_EPS = 1e-5
PROVENANCES = ("clean", "attacked-g", "attacked-h", "attacked-mix")
DEFAULT_POLICY = {"clean": 0, "attacked-g": 1, "attacked-h": 0, "attacked-mix": 1}
MIXER_FORMAT = "adasmooth-mixer"
MIXER_VERSION = 1


@dataclass(frozen=True)
class MixerNet:
    reduce: Layer
    mlp: Net
    scale: float = 2.0
    alpha_min: float = 0.0
    alpha_max: float = 1.0
    shift: float = 0.0
    ema_decay: float = 0.8
    running_mean: float = 0.0
    running_var: float = 1.0
    full_range: bool = False
    taps: tuple[int, int] = (0, 1)

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("sigmoid scale must be > 0")
        if not 0.0 <= self.alpha_min < self.alpha_max <= 1.0:
            raise ConfigError("need 0 <= alpha_min < alpha_max <= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("EMA decay must lie in [0, 1)")
        if not self.running_var > 0:
            raise ConfigError("running variance must be > 0")
        if self.mlp.n_classes != 1:
            raise ShapeError("the mixing MLP must output one score")

    # -- parameters ---------------------------------------------------------------
    def params(self) -> list[np.ndarray]:
        return [self.reduce.weight, self.reduce.bias] + self.mlp.params()

    def with_params(self, flat: Sequence[np.ndarray]) -> "MixerNet":
        reduce = replace(self.reduce, weight=np.array(flat[0]), bias=np.array(flat[1]))
        return replace(self, reduce=reduce, mlp=self.mlp.with_params(flat[2:]))

    def training_view(self) -> "MixerNet":
        return replace(self, full_range=True)

    def eval_view(self) -> "MixerNet":
        return replace(self, full_range=False)

    # -- evaluation ---------------------------------------------------------------
    def features_t(self, g_acts, h_acts, params=None) -> Tensor:
        up, mid = self.taps
        if len(g_acts) <= mid or len(h_acts) <= mid:
            raise ShapeError("both bases must expose two captured hidden layers")
        upstream = ad.concat([g_acts[up], h_acts[up]], axis=1)
        middle = ad.concat([g_acts[mid], h_acts[mid]], axis=1)
        if middle.shape[1] != self.reduce.fan_in or upstream.shape[1] + self.reduce.fan_out != self.mlp.in_dim:
            raise ShapeError("base activations do not match the mixing network's construction")
        if params is None:
            reduced = middle @ self.reduce.weight.T + self.reduce.bias
        else:
            reduced = middle @ ad.transpose(params[0]) + params[1]
        return ad.concat([upstream, reduced], axis=1)

    def raw_t(self, g_acts, h_acts, params=None) -> Tensor:
        feats = self.features_t(g_acts, h_acts, params)
        out, _ = self.mlp.apply(feats, None if params is None else params[2:])
        return ad.reshape(out, (-1,))

    def squash_t(self, raw: Tensor) -> Tensor:
        z = (raw - self.running_mean) * (1.0 / np.sqrt(self.running_var + BN_EPS))
        if self.full_range:
            return ad.sigmoid(ad.clip(z * self.scale, -ARG_CLIP, ARG_CLIP))
        s = ad.sigmoid(ad.clip(z * self.scale + self.shift, -ARG_CLIP, ARG_CLIP))
        return s * (self.alpha_max - self.alpha_min) + self.alpha_min

    def alpha_t(self, g_acts, h_acts, params=None) -> Tensor:
        return self.squash_t(self.raw_t(g_acts, h_acts, params))


def mixer_forward(mn: MixerNet, g_acts, h_acts) -> np.ndarray:
    """alpha for captured activations given as arrays (one row per input)."""
    g_t = [Tensor(np.atleast_2d(a)) for a in g_acts]
    h_t = [Tensor(np.atleast_2d(a)) for a in h_acts]
    return mn.alpha_t(g_t, h_t).data


def init_mixer(g: Net, h: Net, rng: np.random.Generator, hidden: Sequence[int] = (32,),
               reduce_dim: int = 8, **kwargs) -> MixerNet:
    if len(g.capture) < 2 or len(h.capture) < 2:
        raise ShapeError("bases need at least two captured hidden layers")
    up = g.capture_sizes[0] + h.capture_sizes[0]
    mid = g.capture_sizes[1] + h.capture_sizes[1]
    lim = np.sqrt(3.0 / mid)
    reduce = Layer(rng.uniform(-lim, lim, size=(reduce_dim, mid)), np.zeros(reduce_dim), "linear")
    mlp = init_net([up + reduce_dim, *hidden, 1], rng)
    return MixerNet(reduce, mlp, **kwargs)


# -- losses --------------------------------------------------------------------------------
def combine_losses(l_ce, l_bce, weights: tuple[float, float, float]):
    """c_ce * l_ce + c_bce * l_bce + c_prod * l_ce * l_bce."""
    c_ce, c_bce, c_prod = weights
    return l_ce * c_ce + l_bce * c_bce + l_ce * l_bce * c_prod


def composite_loss(mixed_logits: Tensor, y, alpha: Tensor, alpha_tilde,
                   weights: tuple[float, float, float] = (0.0, 1.5, 0.2)) -> Tensor:
    """Batch mean of the per-example composite loss."""
    if min(weights) < 0:
        raise ConfigError("loss weights must be >= 0")
    l_ce = cross_entropy(mixed_logits, y)
    l_bce = bce(alpha, np.asarray(alpha_tilde, dtype=np.float64))
    return combine_losses(l_ce, l_bce, weights).mean()


def make_pseudo_label(provenance: str, policy: Mapping[str, int] | None = None) -> int:
    """Which base to trust: 0 for g, 1 for h."""
    policy = DEFAULT_POLICY if policy is None else policy
    if provenance not in PROVENANCES or provenance not in policy:
        raise ValueError(f"unknown example provenance {provenance!r}")
    label = int(policy[provenance])
    if label not in (0, 1):
        raise ConfigError("pseudo labels must be 0 or 1")
    return label


def _provenance(spec) -> str:
    return {"STD": "attacked-g", "ROB": "attacked-h"}.get(spec.mode, "attacked-mix")


# -- training -------------------------------------------------------------------------------
@dataclass(frozen=True)
class MixerTrainConfig:
    """Settings for :func:`train_mixer`.

    ``attacks`` is the pool of attack specs; every batch adds one attacked
    copy of the clean inputs per pool entry. STD/ROB entries are labelled as
    attacks on g/h, MIX entries as attacks on the mixture.
    """

    c_ce: float = 0.0
    c_bce: float = 1.5
    c_prod: float = 0.2
    policy: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_POLICY))
    attacks: tuple = ()
    lr: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    scale: float = 2.0
    alpha_min: float = 0.0
    alpha_max: float = 1.0
    ema_decay: float = 0.8
    hidden: tuple[int, ...] = (32,)
    reduce_dim: int = 8
    bn_momentum: float = 0.1
    bn_epochs: int = 1
    domain: tuple | None = None

    def __post_init__(self):
        if min(self.c_ce, self.c_bce, self.c_prod) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.bn_epochs < 0:
            raise ConfigError("bn_epochs must be >= 0")
        if self.c_ce <= 0 and self.c_bce <= 0:
            raise ConfigError("at least one of c_ce and c_bce must be positive")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.c_ce, self.c_bce, self.c_prod)


def ema_update(shadow, params, decay: float) -> list[np.ndarray]:
    """shadow <- decay * shadow + (1 - decay) * params, per array."""
    return [decay * s + (1 - decay) * p for s, p in zip(shadow, params)]


def _frozen_features(net: Net, x: np.ndarray) -> tuple[np.ndarray, list[Tensor]]:
    logits, acts = net.apply(Tensor(x))
    return logits, [Tensor(a.data) for a in acts]


def train_mixer(mc: MixedClassifier, data: Dataset, cfg: MixerTrainConfig,
                log: list | None = None) -> MixerNet:
    """Fit alpha(x) on clean and freshly attacked batches with the bases frozen.

    Returns the exponential-moving-average weights in evaluation mode, with
    the configured output range. ``log`` receives the mean loss per epoch.
    """
    from .attacks import attack_mixed, randomized

    if mc.config.variant != "final":
        raise ConfigError("mixing networks use the final mixing variant")
    rng = np.random.default_rng(cfg.seed)
    mixer = init_mixer(mc.g, mc.h, rng, cfg.hidden, cfg.reduce_dim, scale=cfg.scale,
                       alpha_min=cfg.alpha_min, alpha_max=cfg.alpha_max,
                       ema_decay=cfg.ema_decay, full_range=True)
    params = [p.copy() for p in mixer.params()]
    shadow = [p.copy() for p in params]
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    mean, var = None, None
    s_g, s_h = mc.config.s_g, mc.config.s_h
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in np.array_split(rng.permutation(len(data)), max(1, -(-len(data) // cfg.batch_size))):
            xb, yb = data.x[idx], data.y[idx]
            current = mixer.with_params(params)
            if mean is not None:
                current = replace(current, running_mean=mean, running_var=var)
            view = replace(mc, mixer=current)
            xs, ys, labels = [xb], [yb], [np.full(len(idx), make_pseudo_label("clean", cfg.policy))]
            for spec in cfg.attacks:
                s = randomized(spec, rng) if spec.randomize else spec
                seed = int(rng.integers(2**31))
                adv = attack_mixed(view, xb, yb, s, cfg.domain, seed).x_adv
                xs.append(adv)
                ys.append(yb)
                labels.append(np.full(len(idx), make_pseudo_label(_provenance(spec), cfg.policy)))
            x_all, y_all, t_all = np.concatenate(xs), np.concatenate(ys), np.concatenate(labels)
            g_logits, g_acts = _frozen_features(mc.g, x_all)
            h_logits, h_acts = _frozen_features(mc.h, x_all)
            pts = [Tensor(p, requires_grad=True) for p in params]
            raw = current.raw_t(g_acts, h_acts, pts)
            # Running statistics are updated before use and never differentiated.
            # They freeze after ``bn_epochs`` so the network can still learn an
            # offset; live standardization would pin the mean alpha near 1/2.
            bm, bv = float(raw.data.mean()), float(raw.data.var())
            if mean is None:
                mean, var = bm, max(bv, BN_EPS)
            elif epoch < cfg.bn_epochs:
                mean = (1 - cfg.bn_momentum) * mean + cfg.bn_momentum * bm
                var = (1 - cfg.bn_momentum) * var + cfg.bn_momentum * max(bv, BN_EPS)
            current = replace(current, running_mean=mean, running_var=var)
            alpha = current.squash_t(raw)
            g_out = _transform(Tensor(g_logits.data), s_g, "probabilities", mc.config.hardmax_g)
            h_out = _transform(Tensor(h_logits.data), s_h, "probabilities")
            mixed = mix_final(g_out, h_out, ad.reshape(alpha, (-1, 1)))
            loss = composite_loss(mixed, y_all, alpha, t_all, cfg.weights)
            if not np.isfinite(loss.data):
                raise NumericalError(f"mixer training diverged at epoch {epoch}")
            loss.backward()
            params = opt.step(params, [p.grad if p.grad is not None else np.zeros_like(p.data) for p in pts])
            shadow = ema_update(shadow, params, cfg.ema_decay)
            total += float(loss.data) * len(y_all)
            count += len(y_all)
        if log is not None:
            log.append(total / count)
    out = mixer.with_params(shadow)
    if mean is not None:
        out = replace(out, running_mean=mean, running_var=var)
    return out.eval_view()


def calibrate_shift(mc: MixedClassifier, data: Dataset, target_accuracy: float,
                    grid: np.ndarray | None = None) -> MixerNet:
    """Largest output shift whose clean accuracy on ``data`` reaches the target.

    Larger shifts push alpha towards alpha_max (more weight on h). If no shift
    reaches the target, the most accurate one is kept.
    """
    from .mixing import mixed_forward

    if mc.mixer is None:
        raise ConfigError("calibration needs a mixing network")
    grid = np.linspace(-15.0, 15.0, 121) if grid is None else np.asarray(grid, dtype=np.float64)
    best_shift, best_acc, chosen = None, -1.0, None
    for shift in grid:
        cand = replace(mc, mixer=replace(mc.mixer, shift=float(shift)))
        acc = float((mixed_forward(cand, data.x).argmax(axis=1) == data.y).mean())
        if acc > best_acc:
            best_shift, best_acc = float(shift), acc
        if acc >= target_accuracy - 1e-12:
            chosen = float(shift)
    return replace(mc.mixer, shift=best_shift if chosen is None else chosen)


# -- checkpoints ---------------------------------------------------------------------------
def mixer_to_dict(mn: MixerNet) -> dict:
    reduce_net = Net((mn.reduce,), capture=())
    return {
        "format": MIXER_FORMAT,
        "version": MIXER_VERSION,
        "reduce": net_to_dict(reduce_net),
        "mlp": net_to_dict(mn.mlp),
        "meta": {
            "scale": mn.scale, "alpha_min": mn.alpha_min, "alpha_max": mn.alpha_max,
            "shift": mn.shift, "ema_decay": mn.ema_decay, "running_mean": mn.running_mean,
            "running_var": mn.running_var, "taps": list(mn.taps),
        },
    }


def mixer_from_dict(obj: dict) -> MixerNet:
    if obj.get("format") != MIXER_FORMAT or obj.get("version") != MIXER_VERSION:
        raise FormatError("not a mixer checkpoint")
    try:
        meta = obj["meta"]
        reduce = net_from_dict(obj["reduce"]).layers[0]
        return MixerNet(reduce, net_from_dict(obj["mlp"]), float(meta["scale"]),
                        float(meta["alpha_min"]), float(meta["alpha_max"]), float(meta["shift"]),
                        float(meta["ema_decay"]), float(meta["running_mean"]),
                        float(meta["running_var"]), False, tuple(meta["taps"]))
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed mixer checkpoint: {exc}") from exc


def save_mixer(mn: MixerNet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mixer_to_dict(mn)))


def load_mixer(path: str | Path) -> MixerNet:
    return mixer_from_dict(json.loads(Path(path).read_text()))
