"""Run configuration: one JSON document with strict keys and full defaults.

Every section maps onto a frozen dataclass.  Unknown keys are rejected with
their dotted path so typos fail loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import EPSILON_GRID
from .data import Dataset, GlyphSpec, gen_two_part_glyphs, load_cifar_binary, load_idx
from .model import ConfigError
from .train import TrainConfig


@dataclass(frozen=True)
class DataSection:
    source: str = "glyphs"  # "glyphs" | "idx" | "cifar"
    glyph: GlyphSpec = GlyphSpec()
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    num_classes: int = 10

    def __post_init__(self):
        if self.source not in ("glyphs", "idx", "cifar"):
            raise ConfigError(f"data.source must be glyphs, idx or cifar, got {self.source!r}")
        if self.source == "glyphs":
            self.glyph.validate()


@dataclass(frozen=True)
class MetricsSection:
    select: tuple[str, ...] = ("top1", "top5", "ece", "brier", "aurc", "fpr95")
    ece_bins: int = 15
    tpr: float = 0.95

    def __post_init__(self):
        unknown = set(self.select) - {"top1", "top5", "ece", "brier", "aurc", "fpr95"}
        if unknown:
            raise ConfigError(f"metrics.select has unknown metrics {sorted(unknown)}")
        if self.ece_bins < 1 or not 0 < self.tpr <= 1:
            raise ConfigError("metrics.ece_bins must be >= 1 and metrics.tpr in (0, 1]")


@dataclass(frozen=True)
class AttackSection:
    epsilons: tuple[float, ...] = EPSILON_GRID
    steps: tuple[int, ...] = (1, 10)
    limit: int | None = None  # evaluate on the first `limit` test images only

    def __post_init__(self):
        if any(e < 0 for e in self.epsilons) or any(s < 1 for s in self.steps):
            raise ConfigError("attack.epsilons must be >= 0 and attack.steps >= 1")


@dataclass(frozen=True)
class DiagSection:
    batches: int = 4
    batch_size: int = 64


@dataclass(frozen=True)
class SweepSection:
    gamma: tuple[float, ...] = (1.0,)
    alpha: tuple[float, ...] = (1.0,)
    p_r: tuple[float, ...] = (0.0, 0.5)
    grid: tuple[int, ...] = (2, 4)  # patches per side; m = image_size // grid
    epochs: int | None = None
    jobs: int = 1


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = DataSection()
    train: TrainConfig = TrainConfig()
    output_dir: str = "runs"
    metrics: MetricsSection = MetricsSection()
    attack: AttackSection = AttackSection()
    diag: DiagSection = DiagSection()
    sweep: SweepSection = SweepSection()

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def digest(self) -> str:
        """Short hash of everything except the seed, for run directory names."""
        d = self.to_dict()
        d["train"].pop("seed")
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"{self.digest()}-s{self.train.seed}"

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {type(value).__name__}")
        return build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (str, bool) and isinstance(value, tp):
        return value
    if tp in (int, float, str, bool):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def build(cls, data: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build(RunConfig, raw)


def load_datasets(section: DataSection) -> tuple[Dataset, Dataset]:
    if section.source == "glyphs":
        return gen_two_part_glyphs(section.glyph)
    if section.source == "idx":
        paths = (section.train_images, section.train_labels, section.test_images, section.test_labels)
        if any(p is None for p in paths):
            raise ConfigError("data.source=idx needs train_images, train_labels, test_images and test_labels")
        return (
            load_idx(section.train_images, section.train_labels, "train", section.num_classes),
            load_idx(section.test_images, section.test_labels, "test", section.num_classes),
        )
    if not section.train_files or not section.test_files:
        raise ConfigError("data.source=cifar needs train_files and test_files")
    return _concat([load_cifar_binary(p, "train", section.num_classes) for p in section.train_files]), _concat(
        [load_cifar_binary(p, "test", section.num_classes) for p in section.test_files]
    )


def _concat(parts: list[Dataset]) -> Dataset:
    if len(parts) == 1:
        return parts[0]
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].split,
        parts[0].num_classes,
    )
