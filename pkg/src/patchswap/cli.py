"""Command-line entry point: ``patchswap <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures also print one JSON line on stderr, for example::

    {"error": "usage", "code": 2, "message": "unknown config key(s): train.foo"}
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import attack_accuracy, fgsm
from .augment import SwapPolicy
from .config import RunConfig, load_config, load_datasets
from .data import Dataset
from .diagnostics import layer_grad_magnitudes, target_confidence_gap
from .metrics import PredictionSet, UndefinedMetricError, aurc, brier, ece, fpr_at_tpr, top_k_accuracy
from .model import ConfigError, build_model
from .pairing import build_class_index, sample_pair_batches
from .serialization import save_tensors
from .train import TrainReport, fit, load_checkpoint, predict_logits, restore_model

log = logging.getLogger("patchswap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


# -- helpers ---------------------------------------------------------------------


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "output_dir", None):
        cfg = dataclasses.replace(cfg, output_dir=args.output_dir)
    if getattr(args, "epochs", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs, lr_decay_epochs=_clip_decay(cfg.train.lr_decay_epochs, args.epochs)))
    return cfg


def _clip_decay(decay, epochs):
    return tuple(d for d in decay if d <= epochs)


def _write_rows(path, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    text = buf.getvalue()
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def _model_from(cfg: RunConfig, checkpoint):
    ck = load_checkpoint(checkpoint)
    return restore_model(ck, cfg.train.model)


def _metric_values(pred: PredictionSet, cfg: RunConfig) -> dict[str, float]:
    m = cfg.metrics
    C = pred.probs.shape[1]
    table = {
        "top1": lambda: top_k_accuracy(pred, 1),
        "top5": lambda: top_k_accuracy(pred, min(5, C)),
        "ece": lambda: ece(pred, m.ece_bins),
        "brier": lambda: brier(pred),
        "aurc": lambda: aurc(pred),
        "fpr95": lambda: fpr_at_tpr(pred, m.tpr),
    }
    out = {}
    for name in m.select:
        try:
            out[name] = table[name]()
        except UndefinedMetricError:
            out[name] = float("nan")
    return out


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    train, test = load_datasets(cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in (train, test):
        save_tensors(out / f"{ds.split}.psd", {"images": ds.images, "labels": ds.labels.astype(np.uint64)})
    print(json.dumps({"train": len(train), "test": len(test), "dir": str(out)}))
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    train, test = load_datasets(cfg.data)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    report = fit(cfg.train, train, test, run_dir, resume_from=args.resume, keep_epoch_checkpoints=args.keep_epochs)
    best = report.best()
    print(json.dumps({"run_dir": str(run_dir), "epochs": len(report), "best_test_top1": best.test_top1 if best else None}))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    _, test = load_datasets(cfg.data)
    model = _model_from(cfg, args.checkpoint)
    pred = PredictionSet.from_logits(predict_logits(model, test.images, cfg.train.eval_batch), test.labels)
    values = _metric_values(pred, cfg)
    _write_rows(args.out, ("metric", "value"), [(k, float(v)) for k, v in values.items()])
    return 0


def cmd_attack(args) -> int:
    cfg = _resolve(args)
    _, test = load_datasets(cfg.data)
    limit = args.limit if args.limit is not None else cfg.attack.limit
    if limit is not None:
        test = test.subset(np.arange(min(limit, len(test))))
    model = _model_from(cfg, args.checkpoint)
    eps_grid = tuple(args.epsilon) if args.epsilon else cfg.attack.epsilons
    steps_grid = tuple(args.steps) if args.steps else cfg.attack.steps
    if args.dump:
        Path(args.dump).mkdir(parents=True, exist_ok=True)
    rows = []
    for steps in steps_grid:
        for eps in eps_grid:
            acc, worst = attack_accuracy(model, test.images, test.labels, eps, steps)
            rows.append(("fgsm" if steps == 1 else "i-fgsm", steps, float(eps), float(acc), float(worst)))
            if args.dump:
                adv = fgsm(model, test.images, test.labels, eps, steps)
                save_tensors(Path(args.dump) / f"adv_s{steps}_e{eps:g}.psd", {"images": adv.astype(np.float32)})
    _write_rows(args.out, ("method", "steps", "epsilon", "accuracy", "max_linf"), rows)
    return 0


def cmd_diag(args) -> int:
    cfg = _resolve(args)
    train, _ = load_datasets(cfg.data)
    if args.checkpoint:
        model = _model_from(cfg, args.checkpoint)
    else:
        model = build_model(cfg.train.model, np.random.default_rng([cfg.train.seed, 0]), np.dtype(cfg.train.dtype))
    rng = np.random.default_rng([cfg.train.seed, 3])
    index = build_class_index(train.labels)
    order = rng.permutation(len(train))[: cfg.diag.batches * cfg.diag.batch_size]
    batches = list(sample_pair_batches(index, train.labels, order, cfg.diag.batch_size, rng, train.images))
    policy = cfg.train.swap
    out = Path(args.out) if args.out else None
    # per-layer gradient magnitude under both objectives, averaged over the sampled batches
    rows = []
    for mode in ("hard_label", "self_distill"):
        acc: dict[str, float] = {}
        for b, pb in enumerate(batches):
            mags = layer_grad_magnitudes(model, pb, mode, cfg.train.distill, policy, rng=[cfg.train.seed, 4, b])
            for k, v in mags.items():
                acc[k] = acc.get(k, 0.0) + v / len(batches)
        rows += [(mode, depth, name, float(v)) for depth, (name, v) in enumerate(acc.items())]
    _write_rows(out / "layer_grads.csv" if out else None, ("mode", "depth", "layer", "mean_abs_grad"), rows)
    gaps = [
        target_confidence_gap(model, pb, SwapPolicy(policy.m, p), 1.0, rng=[cfg.train.seed, 5, b])
        for p in (0.0, policy.p_r)
        for b, pb in enumerate(batches)
    ]
    n = len(batches)
    gap_rows = [("no_swap", float(np.mean(gaps[:n]))), ("swap", float(np.mean(gaps[n:])))]
    _write_rows(out / "confidence_gap.csv" if out else None, ("pairs", "target_confidence_gap"), gap_rows)
    # per-epoch series logged during training, when a report sits next to the checkpoint
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        if ck.report is not None:
            rep = TrainReport.from_array(ck.report)
            series = [(r.epoch, r.kd_grad_l1, r.conf_gap) for r in rep.records]
            _write_rows(out / "trend.csv" if out else None, ("epoch", "kd_grad_l1", "conf_gap"), series)
    return 0


def _sweep_cell(payload):
    cfg_dict, gamma, alpha, p_r, grid = payload
    from .config import RunConfig as RC, build

    cfg = build(RC, cfg_dict)
    size = cfg.data.glyph.image_size if cfg.data.source == "glyphs" else None
    train, test = load_datasets(cfg.data)
    size = size or train.images.shape[-1]
    if size % grid:
        raise ConfigError(f"grid {grid} does not divide image size {size}")
    tc = dataclasses.replace(
        cfg.train,
        mode="self_distill",
        distill=dataclasses.replace(cfg.train.distill, gamma=gamma, alpha=alpha),
        swap=SwapPolicy(m=size // grid, p_r=p_r),
        p_r_schedule=None,
    )
    rep = fit(tc, train, test)
    best, last = rep.best(), rep.records[-1] if rep.records else None
    return (
        gamma, alpha, p_r, grid, size // grid,
        best.test_top1 if best else float("nan"),
        last.test_top1 if last else float("nan"),
        last.train_top1 if last else float("nan"),
    )  # fmt: skip


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    sw = cfg.sweep
    gammas = tuple(args.gamma) if args.gamma else sw.gamma
    alphas = tuple(args.alpha) if args.alpha else sw.alpha
    prs = tuple(args.p_r) if args.p_r else sw.p_r
    grids = tuple(args.grid) if args.grid else sw.grid
    epochs = args.epochs if args.epochs is not None else sw.epochs
    if epochs is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, epochs=epochs, lr_decay_epochs=_clip_decay(cfg.train.lr_decay_epochs, epochs))
        )
    base = cfg.to_dict()
    cells = [(base, g, a, p, k) for g, a, p, k in itertools.product(gammas, alphas, prs, grids)]
    jobs = args.jobs or sw.jobs
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    out = args.out or (cfg.run_dir() / "heatmap.csv")
    header = ("gamma", "alpha", "p_r", "grid", "m", "best_test_top1", "final_test_top1", "final_train_top1")
    _write_rows(out, header, rows)
    if out != "-":
        print(json.dumps({"heatmap": str(out), "rows": len(rows)}))
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="patchswap", description="Intra-class patch swap self-distillation experiments.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True):
        sp.add_argument("--config", metavar="FILE", default=None, help="JSON run configuration (defaults used when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override train.seed")

    sp = sub.add_parser("gen-data", help="generate the glyph dataset (or load files) and save it", formatter_class=fmt)
    common(sp, seed=False)
    sp.add_argument("--out", required=True, metavar="DIR", help="directory for train.psd and test.psd")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train and write report.csv plus checkpoints", formatter_class=fmt)
    common(sp)
    sp.add_argument("--output-dir", default=None, metavar="DIR", help="override output_dir")
    sp.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    sp.add_argument("--resume", default=None, metavar="CKPT", help="resume from a checkpoint written by an earlier run")
    sp.add_argument("--keep-epochs", action="store_true", help="keep one checkpoint per epoch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metric suite of a checkpoint on the test split", formatter_class=fmt)
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True, metavar="CKPT")
    sp.add_argument("--out", default=None, metavar="CSV", help="write here instead of stdout")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("attack", help="FGSM / I-FGSM accuracy over an epsilon grid", formatter_class=fmt)
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True, metavar="CKPT")
    sp.add_argument("--epsilon", type=float, nargs="+", default=None, help="epsilons (default: attack.epsilons)")
    sp.add_argument("--steps", type=int, nargs="+", default=None, help="step counts; 1 is FGSM (default: attack.steps)")
    sp.add_argument("--limit", type=int, default=None, help="attack only the first N test images")
    sp.add_argument("--dump", default=None, metavar="DIR", help="also save adversarial images")
    sp.add_argument("--out", default=None, metavar="CSV", help="write here instead of stdout")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("diag", help="layer gradient magnitudes, confidence gap and KD-gradient trend", formatter_class=fmt)
    common(sp)
    sp.add_argument("--checkpoint", default=None, metavar="CKPT", help="trained model (fresh initialization when omitted)")
    sp.add_argument("--out", default=None, metavar="DIR", help="directory for the CSV tables (stdout when omitted)")
    sp.set_defaults(func=cmd_diag)

    sp = sub.add_parser("sweep", help="grid over gamma, alpha, p_r and patch grid; writes a heatmap table", formatter_class=fmt)
    common(sp)
    sp.add_argument("--output-dir", default=None, metavar="DIR", help="override output_dir")
    sp.add_argument("--gamma", type=float, nargs="+", default=None, help="(default: sweep.gamma)")
    sp.add_argument("--alpha", type=float, nargs="+", default=None, help="(default: sweep.alpha)")
    sp.add_argument("--p-r", type=float, nargs="+", default=None, help="(default: sweep.p_r)")
    sp.add_argument("--grid", type=int, nargs="+", default=None, help="patches per side (default: sweep.grid)")
    sp.add_argument("--epochs", type=int, default=None, help="epochs per cell (default: sweep.epochs or train.epochs)")
    sp.add_argument("--jobs", type=int, default=None, help="parallel worker processes (default: sweep.jobs)")
    sp.add_argument("--out", default=None, metavar="CSV", help="heatmap table path ('-' for stdout)")
    sp.set_defaults(func=cmd_sweep)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", 2, str(exc))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        return _fail("usage", 2, str(exc))
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        return _fail(type(exc).__name__, 1, str(exc))


def main() -> None:
    sys.exit(run())
