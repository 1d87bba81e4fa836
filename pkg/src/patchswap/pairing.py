"""Intra-class mini-batch pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .model import ConfigError


@dataclass(frozen=True)
class PairBatch:
    x_a: np.ndarray
    x_b: np.ndarray
    y: np.ndarray
    idx_a: np.ndarray
    idx_b: np.ndarray

    def __len__(self) -> int:
        return int(self.y.shape[0])


def build_class_index(labels) -> dict[int, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def draw_partners(index: dict[int, np.ndarray], labels: np.ndarray, idx_a: np.ndarray, rng) -> np.ndarray:
    """Uniform same-class partner per element, never the element itself unless it is alone."""
    out = np.empty_like(idx_a)
    for pos, i in enumerate(idx_a):
        members = index[int(labels[i])]
        if members.size == 1:
            out[pos] = i
            continue
        j = members[rng.integers(0, members.size - 1)]
        # skip over the element itself by shifting draws at or past it
        if j == i:
            j = members[-1]
        out[pos] = j
    return out


def sample_pair_batches(
    index: dict[int, np.ndarray],
    labels,
    order: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
    images: np.ndarray | None = None,
    drop_last: bool = False,
) -> Iterator[PairBatch]:
    """Stream of pair batches; ``order`` is the epoch permutation driving ``B_a``."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    labels = np.asarray(labels, dtype=np.int64)
    order = np.asarray(order)
    if order.size == 0 or not index:
        raise ConfigError("cannot sample pairs from an empty dataset")
    for start in range(0, order.size, batch_size):
        idx_a = order[start : start + batch_size]
        if drop_last and idx_a.size < batch_size:
            return
        idx_b = draw_partners(index, labels, idx_a, rng)
        y = labels[idx_a]
        assert np.array_equal(y, labels[idx_b])
        xa = images[idx_a] if images is not None else None
        xb = images[idx_b] if images is not None else None
        yield PairBatch(xa, xb, y, idx_a, idx_b)
