"""Training diagnostics: per-layer gradient size and pair confidence gaps."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .augment import SwapPolicy, swap_batch
from .distill import DistillConfig, cross_entropy, kd_logit_gradient, total_loss
from .model import Model, forward_logits
from .pairing import PairBatch


def _swapped(pb: PairBatch, policy: SwapPolicy, rng) -> tuple[np.ndarray, np.ndarray]:
    if pb.x_b is None:
        return pb.x_a, pb.x_a
    xa, xb, _ = swap_batch(pb.x_a, pb.x_b, policy.m, policy.p_r, rng)
    return xa, xb


def gradient_snapshot(
    model: Model,
    pb: PairBatch,
    mode: str = "self_distill",
    cfg: DistillConfig = DistillConfig(),
    policy: SwapPolicy = SwapPolicy(p_r=0.0),
    rng: np.random.Generator | int = 0,
) -> dict[str, np.ndarray]:
    """Raw parameter gradients from one backward pass, in depth order.

    ``mode`` is ``"self_distill"`` (joint loss on the swapped pair) or
    ``"hard_label"`` (cross-entropy on the first branch only).
    """
    rng = np.random.default_rng(rng)
    dtype = model.params["fc.weight"].dtype
    xa, xb = _swapped(pb, policy, rng)
    model.zero_grad()
    with tn.GradTape() as tape:
        f_a = forward_logits(model, xa.astype(dtype, copy=False))
        if mode == "hard_label":
            loss = tn.scale(cross_entropy(f_a, pb.y), cfg.gamma)
        elif mode == "self_distill":
            loss = total_loss(f_a, forward_logits(model, xb.astype(dtype, copy=False)), pb.y, cfg).total
        else:
            raise ValueError(f"unknown loss mode {mode!r}")
        if loss.requires_grad:
            tape.backward(loss)
    snap = {}
    for name, p in model.params.items():
        snap[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    model.zero_grad()
    return snap


def layer_grad_magnitudes(
    model: Model,
    pb: PairBatch,
    mode: str = "self_distill",
    cfg: DistillConfig = DistillConfig(),
    policy: SwapPolicy = SwapPolicy(p_r=0.0),
    rng: np.random.Generator | int = 0,
) -> dict[str, float]:
    """Mean absolute gradient per parameter tensor, keyed by layer name in depth order."""
    snap = gradient_snapshot(model, pb, mode, cfg, policy, rng)
    return {name: float(np.mean(np.abs(g))) for name, g in snap.items()}


def target_confidence_gap(
    model: Model,
    pb: PairBatch,
    policy: SwapPolicy = SwapPolicy(),
    T: float = 1.0,
    rng: np.random.Generator | int = 0,
) -> float:
    """Mean |p_y(x_a) - p_y(x_b)| over the (swapped) pairs at temperature ``T``."""
    rng = np.random.default_rng(rng)
    dtype = model.params["fc.weight"].dtype
    xa, xb = _swapped(pb, policy, rng)
    la = tn.log_softmax_temp(forward_logits(model, xa.astype(dtype, copy=False)), T).data
    lb = tn.log_softmax_temp(forward_logits(model, xb.astype(dtype, copy=False)), T).data
    idx = np.arange(len(pb.y))
    return float(np.mean(np.abs(np.exp(la[idx, pb.y]) - np.exp(lb[idx, pb.y]))))


def kd_gradient_l1(model: Model, pb: PairBatch, policy: SwapPolicy, T: float, rng=0) -> float:
    """Mean over samples of ``||kd_logit_gradient||_1 / C`` for one pair batch."""
    rng = np.random.default_rng(rng)
    dtype = model.params["fc.weight"].dtype
    xa, xb = _swapped(pb, policy, rng)
    fa = forward_logits(model, xa.astype(dtype, copy=False)).data.astype(np.float64)
    fb = forward_logits(model, xb.astype(dtype, copy=False)).data.astype(np.float64)
    g = kd_logit_gradient(fa, fb, T)
    return float(np.abs(g).sum() / g.size)
