"""Training loops for the base classifiers: standard, PGD-adversarial, TRADES."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Dataset
from .losses import cross_entropy, kl_div
from .net import Net
from .optim import AdamW


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings shared by all base-model trainers.

    ``attack`` (an :class:`~adasmooth.attacks.AttackSpec`) is required by the
    adversarial and TRADES trainers. ``noise_std > 0`` adds Gaussian input
    noise to every batch, which is how smoothing base models are trained.
    """

    epochs: int = 50
    lr: float = 1e-2
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0
    noise_std: float = 0.0
    attack: object | None = None
    beta: float = 6.0
    domain: tuple | None = None


def _param_tensors(net: Net) -> list[Tensor]:
    return [Tensor(p, requires_grad=True) for p in net.params()]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _fit(net: Net, data: Dataset, cfg: TrainConfig, batch_loss, log: list | None) -> Net:
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = [p.copy() for p in net.params()]
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(data), cfg.batch_size, rng):
            xb, yb = data.x[idx], data.y[idx]
            if cfg.noise_std > 0:
                xb = xb + rng.normal(0.0, cfg.noise_std, size=xb.shape)
            current = net.with_params(params)
            pts = [Tensor(p, requires_grad=True) for p in params]
            loss = batch_loss(current, pts, xb, yb, rng)
            if not np.isfinite(loss.data):
                raise NumericalError(f"training diverged at epoch {epoch} (loss={loss.data})")
            loss.backward()
            params = opt.step(params, [p.grad if p.grad is not None else np.zeros_like(p.data) for p in pts])
            total += float(loss.data) * len(idx)
            count += len(idx)
        if log is not None:
            log.append(total / count)
    return net.with_params(params)


def train_standard(net: Net, data: Dataset, cfg: TrainConfig, log: list | None = None) -> Net:
    """Minimize mean cross-entropy on (optionally noise-augmented) data."""

    def batch_loss(current, pts, xb, yb, rng):
        logits, _ = current.apply(Tensor(xb), pts)
        return cross_entropy(logits, yb).mean()

    return _fit(net, data, cfg, batch_loss, log)


def train_adversarial(net: Net, data: Dataset, cfg: TrainConfig, log: list | None = None) -> Net:
    """Minimize cross-entropy on PGD examples crafted against the current weights."""
    from ..attacks import pgd, randomized

    if cfg.attack is None:
        raise ValueError("adversarial training needs cfg.attack")

    def batch_loss(current, pts, xb, yb, rng):
        spec = randomized(cfg.attack, rng) if cfg.attack.randomize else cfg.attack
        seed = int(rng.integers(2**31))
        x_adv = pgd(current, xb, yb, spec, cfg.domain, seed=seed).x_adv
        logits, _ = current.apply(Tensor(x_adv), pts)
        return cross_entropy(logits, yb).mean()

    return _fit(net, data, cfg, batch_loss, log)


def trades_adversary(net: Net, x: np.ndarray, spec, domain, rng: np.random.Generator) -> np.ndarray:
    """PGD maximizing KL(softmax(net(x)) || softmax(net(x + delta)))."""
    from ..attacks import _box, ascend

    p_clean = Tensor(ad._softmax(net.apply(Tensor(x))[0].data))
    lo, hi = _box(x, domain)

    def grad_and_score(z):
        zt = Tensor(z, requires_grad=True)
        kl = kl_div(p_clean, net.apply(zt)[0])
        kl.sum().backward()
        return zt.grad, -kl.data

    x0 = x + 0.001 * rng.standard_normal(x.shape)
    best, _, _ = ascend(grad_and_score, x, x0, spec.eps, spec.norm, spec.steps, spec.eta, lo, hi)
    return best


def train_trades(net: Net, data: Dataset, cfg: TrainConfig, log: list | None = None) -> Net:
    """Minimize CE(clean) + beta * max_delta KL(p(x) || p(x + delta)).

    With ``beta == 0`` no adversary runs, so the random stream and every loss
    value match :func:`train_standard` exactly.
    """
    if cfg.beta < 0:
        raise ValueError("beta must be >= 0")
    if cfg.beta > 0 and cfg.attack is None:
        raise ValueError("TRADES training with beta > 0 needs cfg.attack")

    def batch_loss(current, pts, xb, yb, rng):
        logits, _ = current.apply(Tensor(xb), pts)
        loss = cross_entropy(logits, yb).mean()
        if cfg.beta == 0:
            return loss
        x_adv = trades_adversary(current, xb, cfg.attack, cfg.domain, rng)
        adv_logits, _ = current.apply(Tensor(x_adv), pts)
        return loss + kl_div(ad.softmax(logits), adv_logits).mean() * cfg.beta

    return _fit(net, data, cfg, batch_loss, log)


def accuracy(model, data: Dataset) -> float:
    from .grad import model_outputs

    logits, _ = model_outputs(model, Tensor(data.x), alpha_grad=False)
    return float((logits.data.argmax(axis=1) == data.y).mean())
