"""Datasets: the synthetic two-part glyph benchmark and binary-file loaders.

Each glyph image places its class's *strong* motif in one patch-aligned cell
and the class's *weak* (low-contrast) motif in another, so class evidence is
split across spatial parts.  Patch swapping between two same-class images can
then move the strong part into one image and leave the other with only weak
evidence.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ConfigError


class FormatError(ValueError):
    """A binary file does not match its declared format."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, c, h, w) in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


@dataclass(frozen=True)
class GlyphSpec:
    num_classes: int = 10
    image_size: int = 32
    channels: int = 1
    cell: int = 8
    motif_size: int = 6
    strong_contrast: float = 1.0
    weak_contrast: float = 0.4
    noise_std: float = 0.15
    train_per_class: int = 200
    test_per_class: int = 100
    seed: int = 0
    jitter: bool = True
    # probability that an image's strong motif is left out, leaving only weak evidence;
    # held-out images use their own rate so the test split measures use of both parts
    occlusion: float = 0.0
    test_occlusion: float = 0.25

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.image_size % self.cell:
            raise ConfigError(f"cell {self.cell} does not divide image size {self.image_size}")
        if (self.image_size // self.cell) ** 2 < 2:
            raise ConfigError("need at least two cells per image")
        if self.motif_size > self.cell:
            raise ConfigError(f"motif size {self.motif_size} exceeds cell size {self.cell}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if not (0 <= self.occlusion <= 1 and 0 <= self.test_occlusion <= 1):
            raise ConfigError("occlusion and test_occlusion must be in [0, 1]")


def make_motifs(spec: GlyphSpec) -> tuple[np.ndarray, np.ndarray]:
    """Distinct binary patterns, one strong and one weak per class."""
    rng = np.random.default_rng([spec.seed, 0x6D6F])
    s = spec.motif_size
    seen: set[bytes] = set()
    pats = []
    while len(pats) < 2 * spec.num_classes:
        p = (rng.random((s, s)) < 0.5).astype(np.float64)
        key = p.tobytes()
        if key in seen or p.sum() == 0:
            continue
        seen.add(key)
        pats.append(p)
    pats = np.stack(pats)
    return pats[: spec.num_classes], pats[spec.num_classes :]


def _render(spec: GlyphSpec, labels: np.ndarray, strong, weak, rng: np.random.Generator, occlusion: float) -> np.ndarray:
    n = labels.size
    g = spec.image_size // spec.cell
    s = spec.motif_size
    img = np.zeros((n, spec.channels, spec.image_size, spec.image_size))
    for i, y in enumerate(labels):
        cs, cw = rng.choice(g * g, size=2, replace=False)
        parts = [(cw, weak[y], spec.weak_contrast)]
        if not (occlusion and rng.random() < occlusion):
            parts.insert(0, (cs, strong[y], spec.strong_contrast))
        for cell_id, pat, contrast in parts:
            r, c = divmod(int(cell_id), g)
            dr, dc = rng.integers(0, spec.cell - s + 1, size=2) if spec.jitter else (0, 0)
            r0, c0 = r * spec.cell + dr, c * spec.cell + dc
            img[i, :, r0 : r0 + s, c0 : c0 + s] = contrast * pat
    if spec.noise_std > 0:
        img += rng.normal(0.0, spec.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_two_part_glyphs(spec: GlyphSpec = GlyphSpec()) -> tuple[Dataset, Dataset]:
    """Generate (train, test) glyph datasets; fully determined by ``spec``."""
    spec.validate()
    strong, weak = make_motifs(spec)
    out = []
    splits = (("train", spec.train_per_class, 1, spec.occlusion), ("test", spec.test_per_class, 2, spec.test_occlusion))
    for split, per_class, stream, occlusion in splits:
        rng = np.random.default_rng([spec.seed, stream])
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        labels = labels[rng.permutation(labels.size)]
        images = _render(spec, labels, strong, weak, rng, occlusion).astype(np.float32)
        out.append(Dataset(images, labels, split, spec.num_classes))
    return out[0], out[1]


# -- binary formats --------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file into an array of its declared dtype and dims."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)} (need 4)")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise FormatError(f"{path}: bad magic 0x{raw[:4].hex()} at byte offset 0")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dims at byte offset {len(raw)} (need {head})")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    dtype = np.dtype(_IDX_DTYPES[code])
    need = head + int(np.prod(dims)) * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload at byte offset {len(raw)} (need {need})")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Load an IDX image file (magic 0x00000803) and label file (0x00000801)."""
    for p, want in ((images_path, 3), (labels_path, 1)):
        raw = _read_bytes(p)[:4]
        if len(raw) < 4:
            raise FormatError(f"{p}: truncated header at byte offset {len(raw)} (need 4)")
        if raw != bytes([0, 0, 8, want]):
            raise FormatError(f"{p}: expected magic 0x0000080{want}, got 0x{raw.hex()} at byte offset 0")
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels, split, num_classes)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Load a CIFAR-10 style binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = _read_bytes(path)
    if len(raw) == 0:
        raise FormatError(f"{path}: empty file at byte offset 0")
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {whole * CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, split, num_classes)
