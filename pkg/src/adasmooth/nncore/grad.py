"""Input gradients of attack objectives for any differentiable classifier.

A classifier here is anything exposing ``logits_t(x: Tensor) -> Tensor``.
Classifiers with a mixing weight additionally expose
``outputs_t(x, alpha_grad) -> (logits, alpha)``; ``alpha_grad=False`` stops
the gradient at the mixing weight.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError, ShapeError
from .autodiff import Tensor
from .losses import attack_objective


def model_outputs(model, x: Tensor, alpha_grad: bool = True):
    if hasattr(model, "outputs_t"):
        return model.outputs_t(x, alpha_grad=alpha_grad)
    return model.logits_t(x), None


def objective_and_grad(
    model,
    x: np.ndarray,
    y: np.ndarray,
    loss: str = "ce",
    target: np.ndarray | None = None,
    lam: float = 0.0,
    alpha_grad: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-example objective, its gradient w.r.t. each input row, and the logits."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    logits, alpha = model_outputs(model, xt, alpha_grad)
    obj = attack_objective(logits, y, loss, target=target, alpha=alpha, lam=lam)
    # Rows are independent, so the gradient of the sum is the per-row gradient.
    obj.sum().backward()
    grad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return obj.data, grad, logits.data


def input_gradient(
    model,
    x,
    y,
    loss: str = "ce",
    target=None,
    lam: float = 0.0,
    alpha_grad: bool = True,
) -> np.ndarray:
    """Gradient of the scalar attack loss with respect to the input.

    Accepts a single input vector (with scalar ``y``/``target``) or a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    tb = None if target is None else np.atleast_1d(np.asarray(target, dtype=np.int64))
    if len(yb) != len(xb):
        raise ShapeError("label count does not match input count")
    _, grad, _ = objective_and_grad(model, xb, yb, loss, tb, lam, alpha_grad)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite input gradient")
    return grad[0] if single else grad
