"""Intra-class patch swap, mix-based baseline augmentations, and label noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigError
from .tensor import DimensionError


@dataclass(frozen=True)
class SwapMask:
    selected: np.ndarray  # bool, (grid_rows, grid_cols)

    @property
    def grid_rows(self) -> int:
        return self.selected.shape[0]

    @property
    def grid_cols(self) -> int:
        return self.selected.shape[1]

    @property
    def count(self) -> int:
        return int(self.selected.sum())


@dataclass(frozen=True)
class SwapPolicy:
    m: int = 8
    p_r: float = 0.5

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"patch size must be positive, got {self.m}")
        if not 0.0 <= self.p_r <= 1.0:
            raise ConfigError(f"p_r must be in [0, 1], got {self.p_r}")


def make_swap_mask(grid_rows: int, grid_cols: int, rng: np.random.Generator) -> SwapMask:
    """Draw k uniformly from {1, ..., P-1}, then a uniform k-subset of the P cells."""
    P = grid_rows * grid_cols
    if grid_rows < 1 or grid_cols < 1 or P < 2:
        raise ConfigError(f"a {grid_rows}x{grid_cols} grid has fewer than 2 patches")
    k = int(rng.integers(1, P))
    flat = np.zeros(P, dtype=bool)
    flat[rng.choice(P, size=k, replace=False)] = True
    return SwapMask(flat.reshape(grid_rows, grid_cols))


def _grid(shape: tuple[int, ...], m: int) -> tuple[int, int]:
    h, w = shape[-2:]
    if m < 1 or h % m or w % m:
        raise DimensionError(f"patch size {m} does not divide image size {h}x{w}")
    return h // m, w // m


def pixel_mask(mask: SwapMask, m: int) -> np.ndarray:
    """Expand a cell mask to an (h, w) boolean pixel mask."""
    return np.kron(mask.selected, np.ones((m, m), dtype=bool)).astype(bool)


def apply_patch_swap(x_a: np.ndarray, x_b: np.ndarray, mask: SwapMask, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Exchange the selected m x m cells between two (c, h, w) images."""
    x_a = np.asarray(x_a)
    x_b = np.asarray(x_b)
    if x_a.shape != x_b.shape:
        raise DimensionError(f"pair shapes differ: {x_a.shape} vs {x_b.shape}")
    rows, cols = _grid(x_a.shape, m)
    if (rows, cols) != mask.selected.shape:
        raise DimensionError(f"mask grid {mask.selected.shape} does not match image grid {(rows, cols)}")
    pm = pixel_mask(mask, m)
    return np.where(pm, x_b, x_a), np.where(pm, x_a, x_b)


def intra_patch_swap(
    x_a: np.ndarray, x_b: np.ndarray, m: int, p_r: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Swap a random patch subset between a same-class pair with probability ``p_r``."""
    if not 0.0 <= p_r <= 1.0:
        raise ConfigError(f"p_r must be in [0, 1], got {p_r}")
    x_a = np.asarray(x_a)
    x_b = np.asarray(x_b)
    if x_a.shape != x_b.shape:
        raise DimensionError(f"pair shapes differ: {x_a.shape} vs {x_b.shape}")
    rows, cols = _grid(x_a.shape, m)
    if rng.random() >= p_r:
        return x_a.copy(), x_b.copy()
    return apply_patch_swap(x_a, x_b, make_swap_mask(rows, cols, rng), m)


def swap_batch(
    x_a: np.ndarray, x_b: np.ndarray, m: int, p_r: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairwise :func:`intra_patch_swap` over aligned (n, c, h, w) batches.

    Returns the two swapped batches and a boolean vector of which pairs were swapped.
    """
    out_a = np.empty_like(x_a)
    out_b = np.empty_like(x_b)
    swapped = np.zeros(x_a.shape[0], dtype=bool)
    if x_a.shape != x_b.shape:
        raise DimensionError(f"batch shapes differ: {x_a.shape} vs {x_b.shape}")
    rows, cols = _grid(x_a.shape, m)
    if not 0.0 <= p_r <= 1.0:
        raise ConfigError(f"p_r must be in [0, 1], got {p_r}")
    for i in range(x_a.shape[0]):
        if rng.random() < p_r:
            swapped[i] = True
            out_a[i], out_b[i] = apply_patch_swap(x_a[i], x_b[i], make_swap_mask(rows, cols, rng), m)
        else:
            out_a[i], out_b[i] = x_a[i], x_b[i]
    return out_a, out_b, swapped


# -- baselines -------------------------------------------------------------------


def _onehot(y: int, num_classes: int) -> np.ndarray:
    v = np.zeros(num_classes)
    v[y] = 1.0
    return v


def mixup(x_i, x_j, y_i, y_j, num_classes, lam):
    x = lam * np.asarray(x_i) + (1 - lam) * np.asarray(x_j)
    return x.astype(np.asarray(x_i).dtype), lam * _onehot(y_i, num_classes) + (1 - lam) * _onehot(y_j, num_classes)


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Box of area ratio about ``1 - lam`` centred uniformly, clipped to the image."""
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    return (max(cy - ch // 2, 0), min(cy + ch // 2, h), max(cx - cw // 2, 0), min(cx + cw // 2, w))


def cutmix(x_i, x_j, y_i, y_j, num_classes, box):
    x_i = np.asarray(x_i)
    y0, y1, x0, x1 = box
    x = x_i.copy()
    x[..., y0:y1, x0:x1] = np.asarray(x_j)[..., y0:y1, x0:x1]
    h, w = x_i.shape[-2:]
    lam = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    return x, lam * _onehot(y_i, num_classes) + (1 - lam) * _onehot(y_j, num_classes)


def cutout(x_i, y_i, num_classes, side: int, center: tuple[int, int]):
    x = np.array(x_i, copy=True)
    h, w = x.shape[-2:]
    cy, cx = center
    y0, y1 = max(cy - side // 2, 0), min(cy - side // 2 + side, h)
    x0, x1 = max(cx - side // 2, 0), min(cx - side // 2 + side, w)
    x[..., y0:y1, x0:x1] = 0
    return x, _onehot(y_i, num_classes)


def baseline_augment(
    kind: str,
    x_i,
    x_j,
    y_i: int,
    y_j: int,
    num_classes: int,
    rng: np.random.Generator,
    beta: float = 1.0,
    cutout_side: int | None = None,
):
    """One MixUp / CutMix / CutOut sample. Returns ``(x', soft_label)``.

    CutOut ignores ``x_j``/``y_j``; its square defaults to half the image height.
    """
    if kind == "mixup":
        return mixup(x_i, x_j, y_i, y_j, num_classes, float(rng.beta(beta, beta)))
    if kind == "cutmix":
        h, w = np.shape(x_i)[-2:]
        lam = float(rng.beta(beta, beta))
        return cutmix(x_i, x_j, y_i, y_j, num_classes, cutmix_box(h, w, lam, rng))
    if kind == "cutout":
        h, w = np.shape(x_i)[-2:]
        side = cutout_side if cutout_side is not None else h // 2
        center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
        return cutout(x_i, y_i, num_classes, side, center)
    raise ConfigError(f"unknown augmentation kind {kind!r}; expected mixup, cutmix or cutout")


def baseline_augment_batch(kind, x, y, num_classes, rng, beta: float = 1.0):
    """Apply :func:`baseline_augment` to a batch, partnering each sample with a shuffled one."""
    perm = rng.permutation(len(y))
    xs, ts = [], []
    for i, j in enumerate(perm):
        xi, ti = baseline_augment(kind, x[i], x[j], int(y[i]), int(y[j]), num_classes, rng, beta)
        xs.append(xi)
        ts.append(ti)
    return np.stack(xs).astype(x.dtype), np.stack(ts)


def flip_labels(labels, rate: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Replace exactly ``round(rate * N)`` labels with a different, uniformly chosen class."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"noise rate must be in [0, 1], got {rate}")
    labels = np.array(labels, dtype=np.int64, copy=True)
    n_flip = int(round(rate * labels.size))
    if n_flip == 0:
        return labels
    if num_classes < 2:
        raise ConfigError("cannot flip labels with fewer than 2 classes")
    idx = rng.choice(labels.size, size=n_flip, replace=False)
    # offset in [1, C-1] guarantees a different class
    labels[idx] = (labels[idx] + rng.integers(1, num_classes, size=n_flip)) % num_classes
    return labels
