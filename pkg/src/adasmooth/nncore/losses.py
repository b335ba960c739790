"""Softmax, cross-entropy and the scalar objectives attacks ascend."""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ShapeError
from . import autodiff as ad
from .autodiff import Tensor

LOSS_KINDS = ("ce", "targeted_ce", "margin", "alpha_suppression")

# log(1 - alpha) and log(alpha) are floored here, like common BCE implementations.
_LOG_FLOOR = 1e-12


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis; rejects non-finite logits."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericalError("softmax of non-finite logits")
    return ad._softmax(z, axis=-1)


def prob_margin(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """p_y - max_{i != y} p_i per row (negative when misclassified)."""
    probs = np.atleast_2d(probs)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    rows = np.arange(len(y))
    top = probs[rows, y]
    other = probs.copy()
    other[rows, y] = -np.inf
    return top - other.max(axis=1)


def top_two_gap(probs: np.ndarray) -> np.ndarray:
    """Gap between the largest and second-largest probability per row."""
    s = np.sort(np.atleast_2d(probs), axis=1)
    return s[:, -1] - s[:, -2]


def _onehot(y: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((len(y), c))
    out[np.arange(len(y)), y] = 1.0
    return out


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    """Per-example cross-entropy of logits against integer labels, shape (n,)."""
    y = np.asarray(y, dtype=np.int64)
    c = logits.shape[-1]
    if np.any((y < 0) | (y >= c)):
        raise ShapeError(f"class index out of range for {c} classes")
    logp = ad.log_softmax(logits)
    return -(logp * _onehot(y, c)).sum(axis=-1)


def logit_margin(logits: Tensor, y: np.ndarray) -> Tensor:
    """max_{i != y} z_i - z_y per example; positive means misclassified."""
    y = np.asarray(y, dtype=np.int64)
    c = logits.shape[-1]
    mask = _onehot(y, c)
    z_true = (logits * mask).sum(axis=-1)
    z_other = ad.tmax(logits - mask * 1e30, axis=-1)
    return z_other - z_true


def bce(alpha: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross-entropy of probabilities ``alpha`` against {0,1} targets."""
    t = np.asarray(target, dtype=np.float64)
    la = ad.log(ad.maximum(alpha, _LOG_FLOOR))
    l1a = ad.log(ad.maximum(1.0 - alpha, _LOG_FLOOR))
    return -(la * t + l1a * (1.0 - t))


def kl_div(p_ref: Tensor, logits: Tensor) -> Tensor:
    """KL(p_ref || softmax(logits)) per example."""
    logq = ad.log_softmax(logits)
    logp = ad.log(ad.maximum(p_ref, 1e-300))
    return (p_ref * (logp - logq)).sum(axis=-1)


def attack_objective(
    logits: Tensor,
    y: np.ndarray,
    kind: str = "ce",
    target: np.ndarray | None = None,
    alpha: Tensor | None = None,
    lam: float = 0.0,
) -> Tensor:
    """Per-example quantity an adversary maximizes.

    ``ce``: untargeted cross-entropy. ``targeted_ce``: minus cross-entropy
    towards ``target``. ``margin``: best wrong logit minus true logit.
    ``alpha_suppression`` is cross-entropy; with a mixing weight ``alpha``
    and ``lam > 0`` every objective gains ``lam * log(1 - alpha)``, which
    rewards pushing the mixing weight towards the standard model.
    """
    if kind in ("ce", "alpha_suppression"):
        obj = cross_entropy(logits, y)
    elif kind == "targeted_ce":
        if target is None:
            raise ValueError("targeted_ce needs a target class")
        obj = -cross_entropy(logits, target)
    elif kind == "margin":
        obj = logit_margin(logits, y)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    if alpha is not None and lam != 0.0:
        obj = obj + ad.log(ad.maximum(1.0 - alpha, _LOG_FLOOR)) * lam
    return obj
