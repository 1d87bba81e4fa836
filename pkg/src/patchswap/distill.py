"""Paired cross-entropy and symmetric temperature-scaled KL objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ContractError, DomainError, Tensor

PROB_TOL = 1e-6


@dataclass(frozen=True)
class DistillConfig:
    T: float = 4.0
    gamma: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError(f"temperature must be positive, got {self.T}")
        for name in ("gamma", "alpha"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass
class LossBreakdown:
    l_c1: Tensor
    l_c2: Tensor
    l_kd1: Tensor
    l_kd2: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_c1", "l_c2", "l_kd1", "l_kd2", "total")}


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Batch mean of ``-log softmax(logits)[y]``."""
    n, C = logits.shape
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ContractError(f"labels must lie in [0, {C})")
    logp = tn.log_softmax_temp(logits, 1.0)
    target = tn.one_hot(y, C, dtype=logits.dtype)
    return tn.scale(tn.sum(tn.mul(logp, target)), -1.0 / n)


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Batch mean of ``-sum_k t_k log softmax(logits)_k`` for soft targets."""
    n = logits.shape[0]
    logp = tn.log_softmax_temp(logits, 1.0)
    return tn.scale(tn.sum(tn.mul(logp, Tensor(targets, dtype=logits.dtype))), -1.0 / n)


def _kl_from_log(logp: Tensor, logq: Tensor) -> Tensor:
    n = logp.shape[0]
    return tn.scale(tn.sum(tn.mul(tn.exp(logp), tn.sub(logp, logq))), 1.0 / n)


def kl_divergence(p, q) -> Tensor:
    """Row-mean of ``sum_k p_k (log p_k - log q_k)`` for probability rows.

    Zero entries of ``p`` contribute nothing; a zero in ``q`` where ``p`` is
    positive gives ``inf``.
    """
    p = p if isinstance(p, Tensor) else Tensor(p)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if p.shape != q.shape or p.ndim != 2:
        raise tn.DimensionError(f"kl_divergence: shapes {p.shape} and {q.shape} differ or are not 2-D")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or np.any(np.abs(t.data.sum(axis=1) - 1) > PROB_TOL):
            raise ContractError(f"rows of {name} are not probability vectors")
    with np.errstate(divide="ignore"):
        logp = np.log(p.data)
        logq = np.log(q.data)
    terms = np.where(p.data > 0, p.data * (logp - np.where(p.data > 0, logq, 0)), 0.0)
    out = Tensor(np.asarray(terms.sum(axis=1).mean(), dtype=p.dtype))
    tape = tn._active(p, q)
    if tape is None:
        return out
    n = p.shape[0]
    pd, qd = p.data, q.data

    def adjoint(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dp = np.where(pd > 0, logp - logq + 1, 0.0) * g / n
            dq = -pd / qd * g / n
        return dp, dq

    return tape._record(out.data, (p, q), adjoint)


def kd_loss_pair(f_a: Tensor, f_b: Tensor, T: float) -> tuple[Tensor, Tensor]:
    """``T^2 KL(s(f_a/T) || s(f_b/T))`` and its mirror; gradients reach both inputs."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    la = tn.log_softmax_temp(f_a, T)
    lb = tn.log_softmax_temp(f_b, T)
    t2 = float(T) ** 2
    return tn.scale(_kl_from_log(la, lb), t2), tn.scale(_kl_from_log(lb, la), t2)


def total_loss(f_a: Tensor, f_b: Tensor, y, cfg: DistillConfig = DistillConfig()) -> LossBreakdown:
    if f_a.shape != f_b.shape:
        raise tn.DimensionError(f"branch logits differ in shape: {f_a.shape} vs {f_b.shape}")
    l_c1 = cross_entropy(f_a, y)
    l_c2 = cross_entropy(f_b, y)
    l_kd1, l_kd2 = kd_loss_pair(f_a, f_b, cfg.T)
    ce = tn.scale(tn.add(l_c1, l_c2), 0.5 * cfg.gamma)
    if cfg.alpha == 0:
        total = ce
    else:
        total = tn.add(ce, tn.scale(tn.add(l_kd1, l_kd2), 0.5 * cfg.alpha))
    return LossBreakdown(l_c1, l_c2, l_kd1, l_kd2, total)


def kd_logit_gradient(f_a, f_b, T: float) -> np.ndarray:
    """Closed-form gradient of the per-sample first KD term w.r.t. ``f_b``.

    Equals ``T * (softmax(f_b/T) - softmax(f_a/T))``; at ``T = 1`` this is the
    plain probability difference ``p_b - p_a``.
    """
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    fa = f_a.data if isinstance(f_a, Tensor) else np.asarray(f_a, dtype=np.float64)
    fb = f_b.data if isinstance(f_b, Tensor) else np.asarray(f_b, dtype=np.float64)
    return T * (_softmax(fb / T) - _softmax(fa / T))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
