"""Mini-batch training over intra-class pairs, with checkpoints and CSV reports."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import tensor as tn
from .augment import SwapPolicy, baseline_augment_batch, flip_labels, swap_batch
from .data import Dataset
from .distill import DistillConfig, cross_entropy, kd_logit_gradient, soft_cross_entropy, total_loss
from .metrics import PredictionSet, aurc, brier, ece, top_k_accuracy
from .model import ConfigError, Model, ModelSpec, build_model, forward_logits
from .pairing import PairBatch, build_class_index, sample_pair_batches
from .serialization import load_tensors, save_tensors

log = logging.getLogger(__name__)

MODES = ("self_distill", "hard_label", "mixup", "cutmix", "cutout")
CSV_FIELDS = (
    "epoch", "lr", "p_r", "loss_ce", "loss_kd", "train_top1", "test_top1", "test_top5",
    "ece", "brier", "aurc", "kd_grad_l1", "conf_gap",
)  # fmt: skip

# p_r protocol for a 240-epoch budget: (last epoch of the stage, p_r)
PROGRESSIVE_TABLE = ((30, 0.1), (80, 0.2), (120, 0.3), (240, 0.5))


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass(frozen=True)
class PrSchedule:
    kind: str = "constant"  # "constant" | "progressive"
    value: float = 0.5
    table: tuple[tuple[int, float], ...] = PROGRESSIVE_TABLE
    base_epochs: int = 240

    def __post_init__(self):
        if self.kind not in ("constant", "progressive"):
            raise ConfigError(f"unknown p_r schedule {self.kind!r}")
        if self.kind == "constant" and not 0 <= self.value <= 1:
            raise ConfigError(f"p_r must be in [0, 1], got {self.value}")
        if self.kind == "progressive":
            ends = [e for e, _ in self.table]
            vals = [v for _, v in self.table]
            if ends != sorted(ends) or len(set(ends)) != len(ends) or ends[-1] != self.base_epochs:
                raise ConfigError("progressive table must end at base_epochs with increasing stage ends")
            if vals != sorted(vals) or not all(0 <= v <= 1 for v in vals):
                raise ConfigError("progressive p_r values must be nondecreasing and within [0, 1]")


def p_r_at(schedule: PrSchedule, epoch: int, total_epochs: int) -> float:
    """Swap probability for a 1-based ``epoch``.

    Progressive stage ends are rescaled from ``base_epochs`` to ``total_epochs``
    and rounded half-up to the nearest epoch.
    """
    if not 1 <= epoch <= total_epochs:
        raise tn.ContractError(f"epoch {epoch} outside [1, {total_epochs}]")
    if schedule.kind == "constant":
        return float(schedule.value)
    for end, value in schedule.table:
        if epoch <= math.floor(end * total_epochs / schedule.base_epochs + 0.5):
            return float(value)
    return float(schedule.table[-1][1])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr0: float = 0.05
    lr_decay_epochs: tuple[int, ...] = (18, 24)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    distill: DistillConfig = DistillConfig()
    swap: SwapPolicy = SwapPolicy(m=8, p_r=0.5)
    p_r_schedule: PrSchedule | None = None
    seed: int = 0
    mode: str = "self_distill"
    model: ModelSpec = ModelSpec()
    label_noise: float = 0.0
    mix_beta: float = 1.0
    drop_last: bool = False
    dtype: str = "float32"
    ece_bins: int = 15
    eval_batch: int = 500
    # per-epoch train accuracy uses this many evenly spaced training images (None = all)
    train_eval_size: int | None = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        d = tuple(int(e) for e in self.lr_decay_epochs)
        object.__setattr__(self, "lr_decay_epochs", d)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing, got {d}")
        if d and self.epochs and (d[0] < 1 or d[-1] > self.epochs):
            raise ConfigError(f"lr_decay_epochs {d} must lie within [1, {self.epochs}]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 <= self.label_noise <= 1:
            raise ConfigError("label_noise must be in [0, 1]")
        if self.train_eval_size is not None and self.train_eval_size < 1:
            raise ConfigError("train_eval_size must be positive or null")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for d in self.lr_decay_epochs if epoch > d)
        return self.lr0 * self.lr_decay_factor**drops

    def p_r_at(self, epoch: int) -> float:
        if self.mode != "self_distill" and self.mode != "hard_label":
            return 0.0
        sched = self.p_r_schedule or PrSchedule("constant", self.swap.p_r)
        return p_r_at(sched, epoch, self.epochs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"distill": DistillConfig, "swap": SwapPolicy, "model": ModelSpec}
        for key, typ in nested.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        sched = d.get("p_r_schedule")
        if isinstance(sched, dict):
            sched = dict(sched)
            if "table" in sched:
                sched["table"] = tuple((int(e), float(v)) for e, v in sched["table"])
            d["p_r_schedule"] = PrSchedule(**sched)
        return cls(**d)


# -- optimizer -------------------------------------------------------------------


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> None:
    """In place: ``v = momentum*v + g + wd*p``; ``p -= lr*v``."""
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name} (max |g| = {np.nanmax(np.abs(g))})")
        v = velocity[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, model: Model) -> "SGDState":
        return cls({k: np.zeros_like(p.data) for k, p in model.params.items()})


# -- reporting -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    p_r: float
    loss_ce: float
    loss_kd: float
    train_top1: float
    test_top1: float
    test_top5: float
    ece: float
    brier: float
    aurc: float
    kd_grad_l1: float
    conf_gap: float

    def row(self) -> list[float]:
        return [float(getattr(self, f)) for f in CSV_FIELDS]


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    model: Model | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_FIELDS) + "\n")
        for r in self.records:
            vals = [str(r.epoch)] + [f"{getattr(r, f):.6f}" for f in CSV_FIELDS[1:]]
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def as_array(self) -> np.ndarray:
        return np.array([r.row() for r in self.records], dtype=np.float64).reshape(-1, len(CSV_FIELDS))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TrainReport":
        recs = []
        for row in np.asarray(arr).reshape(-1, len(CSV_FIELDS)):
            vals = dict(zip(CSV_FIELDS, row.tolist()))
            vals["epoch"] = int(vals["epoch"])
            recs.append(EpochRecord(**vals))
        return cls(recs)

    def best(self) -> EpochRecord | None:
        return max(self.records, key=lambda r: r.test_top1, default=None)


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    epoch: int
    rng_state: dict | None = None
    report: np.ndarray | None = None
    config: dict | None = None


def _pack_rng(state: dict) -> np.ndarray:
    if state["bit_generator"] != "PCG64":
        raise ConfigError("only PCG64 generator state can be checkpointed")
    s, inc = state["state"]["state"], state["state"]["inc"]
    mask = (1 << 64) - 1
    return np.array(
        [s >> 64, s & mask, inc >> 64, inc & mask, state["has_uint32"], state["uinteger"]], dtype=np.uint64
    )


def _unpack_rng(arr: np.ndarray) -> dict:
    a = [int(v) for v in arr]
    return {
        "bit_generator": "PCG64",
        "state": {"state": (a[0] << 64) | a[1], "inc": (a[2] << 64) | a[3]},
        "has_uint32": a[4],
        "uinteger": a[5],
    }


def save_checkpoint(
    model: Model,
    opt: SGDState,
    epoch: int,
    path,
    rng: np.random.Generator | None = None,
    report: TrainReport | None = None,
    config: TrainConfig | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[f"param/{name}"] = p.data
    for name, v in opt.velocity.items():
        tensors[f"velocity/{name}"] = v
    tensors["meta/epoch"] = np.array([epoch], dtype=np.uint64)
    if rng is not None:
        tensors["meta/rng"] = _pack_rng(rng.bit_generator.state)
    if report is not None:
        tensors["meta/report"] = report.as_array()
    if config is not None:
        tensors["meta/config"] = np.frombuffer(json.dumps(config.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
    save_tensors(path, tensors)


def load_checkpoint(path) -> Checkpoint:
    t = load_tensors(path)
    if "meta/epoch" not in t:
        raise tn.ContractError(f"{path}: not a training checkpoint (no meta/epoch)")
    params = {k[6:]: v for k, v in t.items() if k.startswith("param/")}
    velocity = {k[9:]: v for k, v in t.items() if k.startswith("velocity/")}
    return Checkpoint(
        params=params,
        velocity=velocity,
        epoch=int(t["meta/epoch"][0]),
        rng_state=_unpack_rng(t["meta/rng"]) if "meta/rng" in t else None,
        report=t.get("meta/report"),
        config=json.loads(t["meta/config"].tobytes()) if "meta/config" in t else None,
    )


def restore_model(ck: Checkpoint, spec: ModelSpec) -> Model:
    model = build_model(spec, 0, dtype=next(iter(ck.params.values())).dtype)
    for name, p in model.params.items():
        if name not in ck.params or ck.params[name].shape != p.shape:
            raise tn.DimensionError(f"checkpoint parameter {name} missing or mis-shaped")
        p.data = ck.params[name].copy()
    return model


# -- evaluation helpers ----------------------------------------------------------


def predict_logits(model: Model, images: np.ndarray, batch: int = 500) -> np.ndarray:
    dtype = model.params["fc.weight"].dtype
    out = [forward_logits(model, images[s : s + batch].astype(dtype, copy=False)).data for s in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes), dtype=dtype)


def evaluate(model: Model, ds: Dataset, bins: int = 15, batch: int = 500) -> dict[str, float]:
    pred = PredictionSet.from_logits(predict_logits(model, ds.images, batch), ds.labels)
    C = pred.probs.shape[1]
    return {
        "top1": top_k_accuracy(pred, 1),
        "top5": top_k_accuracy(pred, min(5, C)),
        "ece": ece(pred, bins),
        "brier": brier(pred),
        "aurc": aurc(pred),
    }


# -- the loop --------------------------------------------------------------------


def plain_batches(labels: np.ndarray, order: np.ndarray, batch_size: int, images, drop_last=False) -> Iterator[PairBatch]:
    """Single-branch batches over ``order`` (no partner draws)."""
    for start in range(0, order.size, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and idx.size < batch_size:
            return
        yield PairBatch(images[idx], None, labels[idx], idx, idx)


@dataclass
class EpochStats:
    loss_ce: float
    loss_kd: float
    kd_grad_l1: float
    conf_gap: float
    steps: int


def _target_prob(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[np.arange(y.size), y]


def train_epoch(
    model: Model,
    batches: Iterable[PairBatch],
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
    opt: SGDState,
) -> EpochStats:
    """One pass: swap each pair, forward both branches, joint loss, SGD step."""
    lr = cfg.lr_at(epoch)
    p_r = cfg.p_r_at(epoch)
    dtype = model.params["fc.weight"].dtype
    params = {k: p.data for k, p in model.params.items()}
    C = model.spec.num_classes
    n_seen = 0
    sums = np.zeros(4)
    steps = 0
    for pb in batches:
        n = len(pb)
        model.zero_grad()
        with tn.GradTape() as tape:
            if cfg.mode == "self_distill":
                xa, xb, _ = swap_batch(pb.x_a, pb.x_b, cfg.swap.m, p_r, rng)
                f_a = forward_logits(model, xa.astype(dtype, copy=False))
                f_b = forward_logits(model, xb.astype(dtype, copy=False))
                parts = total_loss(f_a, f_b, pb.y, cfg.distill)
                loss = parts.total
                ce = 0.5 * (parts.l_c1.item() + parts.l_c2.item())
                kd = 0.5 * (parts.l_kd1.item() + parts.l_kd2.item())
                g = kd_logit_gradient(f_a.data.astype(np.float64), f_b.data.astype(np.float64), cfg.distill.T)
                kd_l1 = float(np.abs(g).sum()) / C
                gap = float(np.abs(_target_prob(f_a.data, pb.y) - _target_prob(f_b.data, pb.y)).sum())
            elif cfg.mode == "hard_label":
                x = pb.x_a
                if pb.x_b is not None and p_r > 0:
                    x, _, _ = swap_batch(pb.x_a, pb.x_b, cfg.swap.m, p_r, rng)
                loss = cross_entropy(forward_logits(model, x.astype(dtype, copy=False)), pb.y)
                ce, kd, kd_l1, gap = loss.item(), 0.0, 0.0, 0.0
            else:
                x, soft = baseline_augment_batch(cfg.mode, pb.x_a, pb.y, C, rng, cfg.mix_beta)
                loss = soft_cross_entropy(forward_logits(model, x.astype(dtype, copy=False)), soft)
                ce, kd, kd_l1, gap = loss.item(), 0.0, 0.0, 0.0
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, step {steps}")
            tape.backward(loss)
        grads = {k: p.grad for k, p in model.params.items()}
        sgd_step(params, grads, opt.velocity, lr, cfg.momentum, cfg.weight_decay)
        sums += (ce * n, kd * n, kd_l1, gap)
        n_seen += n
        steps += 1
    if n_seen == 0:
        return EpochStats(0.0, 0.0, 0.0, 0.0, 0)
    return EpochStats(*(sums / n_seen).tolist(), steps=steps)


def _epoch_batches(cfg: TrainConfig, epoch: int, labels, images, index, rng) -> Iterator[PairBatch]:
    order = rng.permutation(labels.size)
    needs_pairs = cfg.mode == "self_distill" or (cfg.mode == "hard_label" and cfg.p_r_at(epoch) > 0)
    if needs_pairs:
        return sample_pair_batches(index, labels, order, cfg.batch_size, rng, images, cfg.drop_last)
    return plain_batches(labels, order, cfg.batch_size, images, cfg.drop_last)


def fit(
    cfg: TrainConfig,
    train: Dataset,
    test: Dataset,
    out_dir=None,
    resume_from=None,
    keep_epoch_checkpoints: bool = False,
) -> TrainReport:
    """Train from scratch (or resume) and evaluate after every epoch.

    With ``out_dir`` set, writes ``report.csv``, ``checkpoint_final.psd`` and
    ``checkpoint_best.psd`` (plus ``checkpoint_epochNNN.psd`` when asked).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(cfg.dtype)
    labels = train.labels
    if cfg.label_noise > 0:
        labels = flip_labels(labels, cfg.label_noise, train.num_classes, np.random.default_rng([cfg.seed, 2]))
    images = train.images.astype(dtype, copy=False)
    index = build_class_index(labels)

    model = build_model(cfg.model, np.random.default_rng([cfg.seed, 0]), dtype=dtype)
    opt = SGDState.zeros_like(model)
    rng = np.random.default_rng([cfg.seed, 1])
    report = TrainReport()
    start = 1
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        for name, p in model.params.items():
            p.data = ck.params[name].astype(dtype, copy=True)
            opt.velocity[name] = ck.velocity[name].astype(dtype, copy=True)
        if ck.rng_state is not None:
            rng.bit_generator.state = ck.rng_state
        if ck.report is not None:
            report = TrainReport.from_array(ck.report)
        start = ck.epoch + 1
    elif out is not None and keep_epoch_checkpoints:
        save_checkpoint(model, opt, 0, out / "checkpoint_epoch000.psd", rng, report, cfg)

    clean_train = Dataset(images, train.labels, "train", train.num_classes)
    if cfg.train_eval_size is not None and cfg.train_eval_size < len(clean_train):
        clean_train = clean_train.subset(np.linspace(0, len(clean_train) - 1, cfg.train_eval_size).astype(np.int64))
    for epoch in range(start, cfg.epochs + 1):
        batches = _epoch_batches(cfg, epoch, labels, images, index, rng)
        stats = train_epoch(model, batches, cfg, epoch, rng, opt)
        te = evaluate(model, test, cfg.ece_bins, cfg.eval_batch)
        tr = evaluate(model, clean_train, cfg.ece_bins, cfg.eval_batch)
        rec = EpochRecord(
            epoch=epoch, lr=cfg.lr_at(epoch), p_r=cfg.p_r_at(epoch),
            loss_ce=stats.loss_ce, loss_kd=stats.loss_kd, train_top1=tr["top1"],
            test_top1=te["top1"], test_top5=te["top5"], ece=te["ece"], brier=te["brier"], aurc=te["aurc"],
            kd_grad_l1=stats.kd_grad_l1, conf_gap=stats.conf_gap,
        )  # fmt: skip
        report.records.append(rec)
        log.info("epoch %d lr=%.4g p_r=%.2f ce=%.4f kd=%.4f train=%.4f test=%.4f",
                 epoch, rec.lr, rec.p_r, rec.loss_ce, rec.loss_kd, rec.train_top1, rec.test_top1)  # fmt: skip
        if out is not None:
            if keep_epoch_checkpoints:
                save_checkpoint(model, opt, epoch, out / f"checkpoint_epoch{epoch:03d}.psd", rng, report, cfg)
            if report.best() is rec:
                save_checkpoint(model, opt, epoch, out / "checkpoint_best.psd", rng, report, cfg)
    if out is not None:
        save_checkpoint(model, opt, cfg.epochs if report.records else 0, out / "checkpoint_final.psd", rng, report, cfg)
        report.write_csv(out / "report.csv")
    report.model = model
    return report
