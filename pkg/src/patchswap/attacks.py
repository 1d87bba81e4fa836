"""White-box sign-gradient attacks (FGSM and its iterative variant)."""

from __future__ import annotations

import contextlib

import numpy as np

from . import tensor as tn
from .distill import cross_entropy
from .model import Model, forward_logits
from .tensor import DomainError, Tensor

EPSILON_GRID = (0.0, 0.001, 0.003, 0.005, 0.01, 0.05)


@contextlib.contextmanager
def frozen(model: Model):
    """Temporarily stop recording gradients for the model's parameters."""
    flags = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        yield model
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]


def input_gradient(model: Model, x: np.ndarray, y) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch."""
    dtype = model.params["fc.weight"].dtype
    xt = Tensor(np.asarray(x, dtype=dtype), requires_grad=True)
    with frozen(model), tn.GradTape() as tape:
        loss = cross_entropy(forward_logits(model, xt), y)
        tape.backward(loss)
    return xt.grad


def fgsm(
    model: Model,
    x: np.ndarray,
    y,
    epsilon: float,
    steps: int = 1,
    clamp: tuple[float, float] = (0.0, 1.0),
) -> np.ndarray:
    """Sign-gradient attack inside the L-inf ball of radius ``epsilon``.

    ``steps > 1`` gives I-FGSM with step size ``epsilon / steps``, projecting
    back onto the ball and the valid pixel range after every step.
    """
    if epsilon < 0:
        raise DomainError(f"epsilon must be nonnegative, got {epsilon}")
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    x0 = np.asarray(x)
    if epsilon == 0:
        return x0.copy()
    step = epsilon / steps
    adv = x0.copy()
    for _ in range(steps):
        g = input_gradient(model, adv, y)
        adv = _project(adv.astype(np.float64) + step * np.sign(g), x0, epsilon, clamp)
    return adv


def _project(adv: np.ndarray, x0: np.ndarray, epsilon: float, clamp) -> np.ndarray:
    ref = x0.astype(np.float64)
    adv = np.clip(np.clip(adv, ref - epsilon, ref + epsilon), *clamp).astype(x0.dtype)
    # rounding to a narrower dtype can overshoot the ball by one ulp
    over = np.abs(adv.astype(np.float64) - ref) > epsilon
    while over.any():
        adv[over] = np.nextafter(adv[over], x0[over])
        over = np.abs(adv.astype(np.float64) - ref) > epsilon
    return adv


def attack_accuracy(
    model: Model,
    images: np.ndarray,
    labels,
    epsilon: float,
    steps: int = 1,
    batch: int = 250,
    clamp: tuple[float, float] = (0.0, 1.0),
) -> tuple[float, float]:
    """Top-1 accuracy on adversarial inputs and the max L-inf perturbation applied."""
    labels = np.asarray(labels)
    correct = 0
    worst = 0.0
    dtype = model.params["fc.weight"].dtype
    for s in range(0, len(labels), batch):
        xb = images[s : s + batch].astype(dtype, copy=False)
        yb = labels[s : s + batch]
        adv = fgsm(model, xb, yb, epsilon, steps, clamp)
        worst = max(worst, float(np.max(np.abs(adv.astype(np.float64) - xb))) if adv.size else 0.0)
        correct += int((forward_logits(model, adv).data.argmax(axis=1) == yb).sum())
    return correct / max(1, len(labels)), worst
