"""Accuracy, calibration and selective-prediction metrics on softmax outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError


class UndefinedMetricError(ValueError):
    """The metric is not defined for this prediction set."""


@dataclass
class PredictionSet:
    probs: np.ndarray  # (n, C), rows sum to 1
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.labels.shape[0]:
            raise ContractError(f"probs {self.probs.shape} and labels {self.labels.shape} disagree")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise ContractError("probability rows must sum to 1")

    @classmethod
    def from_logits(cls, logits: np.ndarray, labels) -> "PredictionSet":
        z = np.asarray(logits, dtype=np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return cls(p / p.sum(axis=1, keepdims=True), labels)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)  # first maximum, i.e. lowest class id on ties

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels


def top_k_accuracy(pred: PredictionSet, k: int = 1) -> float:
    C = pred.probs.shape[1]
    if not 1 <= k <= C:
        raise ContractError(f"k must be in [1, {C}], got {k}")
    ranked = np.argsort(-pred.probs, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(ranked == pred.labels[:, None], axis=1)))


def ece(pred: PredictionSet, bins: int = 15) -> float:
    """Expected calibration error with equal-width bins ``(b/B, (b+1)/B]`` on max-probability."""
    if bins < 1:
        raise ContractError("bins must be >= 1")
    conf = pred.confidence
    hit = pred.correct.astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    n = conf.size
    total = 0.0
    for b in range(bins):
        sel = idx == b
        nb = int(sel.sum())
        if nb:
            total += nb / n * abs(hit[sel].mean() - conf[sel].mean())
    return float(total)


def brier(pred: PredictionSet) -> float:
    """Mean over samples of the squared distance to the one-hot target (range [0, 2])."""
    target = np.zeros_like(pred.probs)
    target[np.arange(pred.labels.size), pred.labels] = 1.0
    return float(np.mean(np.sum((pred.probs - target) ** 2, axis=1)))


def risk_coverage(pred: PredictionSet) -> tuple[np.ndarray, np.ndarray]:
    """Coverage ``i/n`` and running error rate after accepting the ``i`` most confident samples."""
    order = np.argsort(-pred.confidence, kind="stable")
    errors = (~pred.correct[order]).astype(np.float64)
    i = np.arange(1, errors.size + 1)
    return i / errors.size, np.cumsum(errors) / i


def aurc(pred: PredictionSet) -> float:
    if pred.labels.size < 1:
        raise ContractError("aurc needs at least one sample")
    _, risk = risk_coverage(pred)
    return float(risk.mean())


def fpr_at_tpr(pred: PredictionSet, tpr: float = 0.95) -> float:
    """False-positive rate of misclassification detection at the requested TPR.

    Correct predictions are positives, scored by max probability; a sample is
    flagged positive when its score is >= the threshold.  The threshold is the
    largest one whose TPR still reaches ``tpr``.
    """
    scores = pred.confidence
    pos = pred.correct
    if pos.all() or not pos.any():
        raise UndefinedMetricError("fpr_at_tpr needs both correct and incorrect predictions")
    sp = np.sort(scores[pos])[::-1]
    # the ceil(tpr * P)-th highest positive score is the largest admissible threshold
    need = max(1, int(np.ceil(tpr * sp.size - 1e-12)))
    thr = sp[need - 1]
    return float(np.mean(scores[~pos] >= thr))


def metric_suite(pred: PredictionSet, bins: int = 15) -> dict[str, float]:
    out = {
        "top1": top_k_accuracy(pred, 1),
        "top5": top_k_accuracy(pred, min(5, pred.probs.shape[1])),
        "ece": ece(pred, bins),
        "brier": brier(pred),
        "aurc": aurc(pred),
    }
    try:
        out["fpr95"] = fpr_at_tpr(pred, 0.95)
    except UndefinedMetricError:
        out["fpr95"] = float("nan")
    return out
