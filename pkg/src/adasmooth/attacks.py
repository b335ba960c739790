"""First-order adversaries: PGD, a reduced multi-loss ensemble, and transfer attacks.

All attacks run on a whole batch at once; rows never interact, so the result
for one example does not depend on which other examples share its batch.
Every attack keeps, per example, the iterate with the smallest probability
margin of the attacked model (the most adversarial point seen).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalError
from .nncore.autodiff import Tensor
from .nncore.grad import model_outputs
from .nncore.losses import attack_objective, prob_margin, softmax

MODES = ("STD", "ROB", "MIX-grayblend", "MIX-whitebox", "MIX-adaptive")
HALVING_POINTS = (0.25, 0.5, 0.75)


def _norm_name(norm) -> str:
    key = str(norm).lower().replace("ℓ", "l")
    if key in ("inf", "linf", "l_inf", "infinity"):
        return "linf"
    if key in ("2", "2.0", "l2"):
        return "l2"
    raise ConfigError(f"unsupported norm {norm!r}; use 'linf' or 'l2'")


@dataclass(frozen=True)
class AttackSpec:
    """Threat model and optimizer settings for one attack.

    ``step_size`` defaults to ``2.5 * eps / steps``. ``random_start`` defaults
    to True except in the gray-box mode, which always starts at the clean input.
    ``lam`` weighs the alpha-suppression term and is only legal in
    ``MIX-adaptive`` mode.
    """

    norm: str = "linf"
    eps: float = 0.1
    steps: int = 10
    step_size: float | None = None
    restarts: int = 1
    loss: str = "ce"
    mode: str = "MIX-whitebox"
    lam: float = 0.0
    random_start: bool | None = None
    randomize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "norm", _norm_name(self.norm))
        if not np.isfinite(self.eps) or self.eps < 0:
            raise ConfigError(f"eps must be finite and >= 0, got {self.eps}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.step_size is not None and (not np.isfinite(self.step_size) or self.step_size <= 0):
            raise ConfigError("step_size must be finite and > 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.lam > 0 and self.mode != "MIX-adaptive":
            raise ConfigError("lam is only used by the MIX-adaptive mode")

    @property
    def eta(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.eps / self.steps if self.steps else 0.0

    @property
    def starts_random(self) -> bool:
        if self.random_start is not None:
            return self.random_start
        return self.mode != "MIX-grayblend"

    @property
    def alpha_grad(self) -> bool:
        return self.mode != "MIX-grayblend"


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray
    margin: np.ndarray
    distance: np.ndarray
    aborted: int = 0

    @property
    def accuracy(self) -> float:
        return float(1.0 - self.success.mean()) if len(self.success) else float("nan")

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if len(self.success) else float("nan")


def randomized(spec: AttackSpec, rng: np.random.Generator) -> AttackSpec:
    """Training-time diversification of an attack.

    Radius ~ U[0.5 eps, 1.5 eps], steps ~ U{ceil(T/2)..T}, and in adaptive
    mode the alpha-suppression weight ~ U[0, 1].
    """
    eps = float(rng.uniform(0.5 * spec.eps, 1.5 * spec.eps))
    lo = max(1, int(np.ceil(spec.steps / 2)))
    steps = int(rng.integers(lo, max(lo, spec.steps) + 1)) if spec.steps else 0
    lam = float(rng.uniform(0.0, 1.0)) if spec.mode == "MIX-adaptive" else 0.0
    step_size = None if spec.step_size is None else spec.step_size * eps / max(spec.eps, 1e-300)
    return replace(spec, eps=eps, steps=steps, lam=lam, step_size=step_size, randomize=False)


# -- geometry -----------------------------------------------------------------------
def lp_distance(delta: np.ndarray, norm: str) -> np.ndarray:
    delta = np.atleast_2d(delta)
    if norm == "linf":
        return np.abs(delta).max(axis=1) if delta.shape[1] else np.zeros(len(delta))
    return np.sqrt((delta * delta).sum(axis=1))


def _box(x: np.ndarray, domain) -> tuple[np.ndarray, np.ndarray]:
    if domain is None:
        return np.full_like(x, -np.inf), np.full_like(x, np.inf)
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), x.shape) for b in domain)
    # A clean point outside the box must stay feasible.
    return np.minimum(lo, x), np.maximum(hi, x)


def project(x: np.ndarray, x_adv: np.ndarray, eps, norm: str, lo, hi) -> np.ndarray:
    """Project onto the eps-ball around ``x`` and then into the box ``[lo, hi]``."""
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (len(x),))
    delta = x_adv - x
    if norm == "linf":
        delta = np.clip(delta, -eps[:, None], eps[:, None])
    else:
        nrm = np.sqrt((delta * delta).sum(axis=1))
        scale = np.where(nrm > eps, eps / np.maximum(nrm, 1e-300), 1.0)
        delta = delta * scale[:, None]
    # Clipping towards a box that contains x never increases |delta_j|.
    return np.clip(x + delta, lo, hi)


def _random_start(x, eps, norm, rng) -> np.ndarray:
    n, d = x.shape
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,))
    if norm == "linf":
        return x + rng.uniform(-1.0, 1.0, size=(n, d)) * eps[:, None]
    u = rng.standard_normal((n, d))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    r = rng.uniform(0.0, 1.0, size=n) ** (1.0 / d)
    return x + u * (r * eps)[:, None]


def _step_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad)
    nrm = np.linalg.norm(grad, axis=1, keepdims=True)
    return np.where(nrm > 0, grad / np.maximum(nrm, 1e-300), 0.0)


def ascend(
    grad_and_score: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x: np.ndarray,
    x0: np.ndarray,
    eps,
    norm: str,
    steps: int,
    eta: float,
    lo: np.ndarray,
    hi: np.ndarray,
    halving: tuple[float, ...] = (),
    callback: Callable[[np.ndarray], None] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projected ascent from ``x0`` keeping the per-row iterate of lowest score.

    ``grad_and_score(z)`` returns the ascent gradient at ``z`` and the score to
    track (lower is more adversarial). Rows whose gradient turns non-finite stop
    moving; they are reported in the returned ``aborted`` mask.
    """
    cur = project(x, x0, eps, norm, lo, hi)
    best_x = cur.copy()
    best_s = np.full(len(x), np.inf)
    aborted = np.zeros(len(x), dtype=bool)
    for t in range(steps + 1):
        grad, score = grad_and_score(cur)
        if callback is not None:
            callback(cur)
        better = score < best_s
        best_s = np.where(better, score, best_s)
        best_x[better] = cur[better]
        if t == steps:
            break
        bad = ~np.all(np.isfinite(grad), axis=1)
        aborted |= bad
        grad = np.where(aborted[:, None], 0.0, grad)
        k = sum(t >= f * steps for f in halving)
        step = np.asarray(eta, dtype=np.float64) * 0.5 ** k
        if step.ndim:
            step = step[:, None]
        cur = project(x, cur + step * _step_direction(grad, norm), eps, norm, lo, hi)
    return best_x, best_s, aborted


# -- attacks -------------------------------------------------------------------------
def _margin_of(model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits, _ = model_outputs(model, Tensor(x), alpha_grad=False)
    probs = softmax(logits.data)
    return prob_margin(probs, y), probs.argmax(axis=1)


def _run(
    target,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    rng: np.random.Generator,
    lo: np.ndarray,
    hi: np.ndarray,
    loss: str,
    tgt: np.ndarray | None,
    halving: tuple[float, ...],
    x_init: np.ndarray | None,
    callback,
    radius: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    eps, eta = spec.eps, spec.eta
    if radius is not None:
        eps = radius
        rel = spec.step_size / spec.eps if spec.step_size and spec.eps > 0 else 2.5 / max(spec.steps, 1)
        eta = radius * rel
    lam = spec.lam if spec.mode == "MIX-adaptive" else 0.0
    if spec.mode == "MIX-adaptive" and loss == "ce":
        loss = "alpha_suppression"

    def grad_and_score(z):
        zt = Tensor(z, requires_grad=True)
        logits, alpha = model_outputs(target, zt, spec.alpha_grad)
        obj = attack_objective(logits, y, loss, target=tgt, alpha=alpha, lam=lam)
        obj.sum().backward()
        g = zt.grad if zt.grad is not None else np.zeros_like(z)
        return g, prob_margin(softmax(logits.data), y)

    best_x, best_m = None, None
    aborted = 0
    for r in range(spec.restarts):
        if r == 0:
            start = x if x_init is None else x_init
        elif spec.starts_random:
            start = _random_start(x, eps, spec.norm, rng)
        else:
            start = x
        bx, bm, ab = ascend(grad_and_score, x, start, eps, spec.norm, spec.steps,
                            eta, lo, hi, halving, callback)
        aborted += int(ab.sum())
        if best_x is None:
            best_x, best_m = bx, bm
        else:
            better = bm < best_m
            best_x[better] = bx[better]
            best_m = np.where(better, bm, best_m)
    return best_x, best_m, aborted


def _result(model, x, y, x_adv, norm, aborted=0) -> AttackResult:
    margin, pred = _margin_of(model, x_adv, y)
    return AttackResult(x_adv, pred != y, margin, lp_distance(x_adv - x, norm), aborted)


def pgd(
    target,
    x,
    y,
    spec: AttackSpec,
    domain=None,
    seed: int = 0,
    x_init: np.ndarray | None = None,
    callback=None,
    radius: np.ndarray | None = None,
) -> AttackResult:
    """Untargeted (or spec.loss-driven) projected gradient ascent on ``target``.

    ``l_inf`` steps follow the gradient sign, ``l_2`` steps the normalized
    gradient; iterates are projected onto the eps-ball and ``domain``.
    ``x_init`` warm-starts the first restart (it must lie in the ball).
    ``radius`` optionally replaces ``spec.eps`` with one radius per row; the
    step size scales with it.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    radius = _radius(radius, spec, len(x))
    lo, hi = _box(x, domain)
    eps = spec.eps if radius is None else radius
    if spec.steps == 0 or np.all(np.asarray(eps) == 0):
        start = x if x_init is None else project(x, x_init, eps, spec.norm, lo, hi)
        if callback is not None:
            callback(start)
        return _result(target, x, y, start, spec.norm)
    rng = np.random.default_rng(seed)
    x_adv, _, aborted = _run(target, x, y, spec, rng, lo, hi, spec.loss, None, (), x_init, callback,
                             radius)
    return _result(target, x, y, x_adv, spec.norm, aborted)


def _radius(radius, spec: AttackSpec, n: int) -> np.ndarray | None:
    if radius is None:
        return None
    r = np.broadcast_to(np.asarray(radius, dtype=np.float64), (n,)).copy()
    if np.any(~np.isfinite(r)) or np.any(r < 0):
        raise ConfigError("per-row radii must be finite and >= 0")
    return r


def apgd_lite(target, x, y, spec: AttackSpec, domain=None, seed: int = 0, n_classes: int | None = None,
              radius: np.ndarray | None = None) -> AttackResult:
    """Reduced ensemble standing in for AutoAttack's gradient components.

    Union of: the plain PGD run of ``spec`` (same seed, so this ensemble is
    never weaker than ``pgd``), then ``spec.restarts`` restarts each of
    untargeted CE, the logit-margin loss, and CE targeted at every wrong
    class, all with the step size halved at 25/50/75% of the steps.
    Per example the minimum-margin point over all members is returned.
    """
    if spec.restarts < 2:
        raise ConfigError("apgd_lite needs restarts >= 2")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    radius = _radius(radius, spec, len(x))
    base = pgd(target, x, y, replace(spec, loss="ce"), domain, seed, radius=radius)
    if spec.steps == 0 or np.all(np.asarray(spec.eps if radius is None else radius) == 0):
        return base
    lo, hi = _box(x, domain)
    best_x, best_m = base.x_adv.copy(), base.margin.copy()
    aborted = base.aborted
    if n_classes is None:
        n_classes = _n_classes(target, x)
    members: list[tuple[str, np.ndarray | None]] = [("ce", None), ("margin", None)]
    for k in range(1, n_classes):
        members.append(("targeted_ce", (y + k) % n_classes))
    for m, (loss, tgt) in enumerate(members, start=1):
        rng = np.random.default_rng([seed, m])
        bx, _, ab = _run(target, x, y, spec, rng, lo, hi, loss, tgt, HALVING_POINTS, None, None, radius)
        aborted += ab
        # Re-score with the attacked model's margin so members are comparable.
        bm, _ = _margin_of(target, bx, y)
        better = bm < best_m
        best_x[better] = bx[better]
        best_m = np.where(better, bm, best_m)
    return _result(target, x, y, best_x, spec.norm, aborted)


def _n_classes(target, x) -> int:
    logits, _ = model_outputs(target, Tensor(x[:1]), alpha_grad=False)
    return logits.shape[-1]


def attack_mixed(mc, x, y, spec: AttackSpec, domain=None, seed: int = 0, ensemble: bool = False,
                 callback=None) -> AttackResult:
    """Attack a mixed classifier under one of the gradient-visibility modes.

    STD/ROB craft the perturbation on the standard/robust base alone and
    report its effect on ``mc`` (transfer). MIX-grayblend differentiates
    through both bases with the mixing weight held constant, MIX-whitebox
    differentiates end-to-end, and MIX-adaptive also rewards lowering the
    mixing weight. ``ensemble=True`` uses :func:`apgd_lite` instead of PGD.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if ensemble:
        if callback is not None:
            raise ConfigError("iterate callbacks are only supported for single PGD attacks")
        attack = apgd_lite
    else:
        def attack(model, *args):
            return pgd(model, *args, callback=callback)
    if spec.mode in ("STD", "ROB"):
        source = mc.g if spec.mode == "STD" else mc.h
        crafted = attack(source, x, y, spec, domain, seed)
        return _result(mc, x, y, crafted.x_adv, spec.norm, crafted.aborted)
    return attack(mc, x, y, spec, domain, seed)


def save_result_csv(result: AttackResult, path: str | Path, header: str | None = None) -> None:
    """Write (index, success, margin, distance) rows."""
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh)
        w.writerow(["index", "success", "margin", "distance"])
        for i, (s, m, d) in enumerate(zip(result.success, result.margin, result.distance)):
            w.writerow([i, int(s), repr(float(m)), repr(float(d))])


def check_not_finite(result: AttackResult) -> None:
    if result.aborted:
        raise NumericalError(f"{result.aborted} attack rows aborted on non-finite gradients")
