import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from patchswap.cli import build_parser, run
from patchswap.config import RunConfig, load_config
from patchswap.serialization import load_tensors

TINY = {
    "data": {
        "glyph": {"num_classes": 4, "image_size": 16, "cell": 8, "train_per_class": 12, "test_per_class": 6, "seed": 3}
    },
    "train": {
        "epochs": 2,
        "batch_size": 8,
        "lr_decay_epochs": [1],
        "model": {"in_channels": 1, "num_classes": 4, "widths": [4, 6], "pool_after": [1, 2]},
    },
    "diag": {"batches": 2, "batch_size": 8},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.json"
    cfg = dict(TINY, output_dir=str(tmp_path / "runs"))
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def trained(cfg_path, capsys):
    assert run(["train", "--config", str(cfg_path), "--seed", "7"]) == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    return info["run_dir"]


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_help_exits_zero_and_lists_defaults(capsys):
    assert run(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out
    for cmd in ("train", "eval", "attack", "diag", "sweep", "gen-data"):
        assert run([cmd, "--help"]) == 0
    out = capsys.readouterr().out
    assert "--keep-epochs" in out and "--epsilon" in out and "default:" in out


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "patchswap", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("patchswap ")


def test_usage_errors_exit_two_with_json_line(capsys, tmp_path):
    assert run([]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["code"] == 2
    assert run(["train", "--bogus"]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "usage"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 3}}))
    assert run(["train", "--config", str(bad)]) == 2
    line = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "train.epochz" in line["message"]


def test_runtime_failure_exits_one(capsys, cfg_path, tmp_path):
    assert run(["eval", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "missing.psd")]) == 1
    line = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert line["code"] == 1 and line["error"] == "FileNotFoundError"


def test_unknown_keys_rejected_and_defaults_complete(tmp_path):
    with pytest.raises(Exception, match="metrics.colour"):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"metrics": {"colour": 1}}))
        load_config(p)
    assert load_config(None) == RunConfig()
    # every default survives a round trip through the document form
    p = tmp_path / "full.json"
    p.write_text(json.dumps(RunConfig().to_dict()))
    assert load_config(p) == RunConfig()


def test_train_twice_gives_identical_csv(cfg_path, tmp_path, capsys):
    paths = []
    for out in ("a", "b"):
        assert run(["train", "--config", str(cfg_path), "--seed", "7", "--output-dir", str(tmp_path / out)]) == 0
        run_dir = json.loads(capsys.readouterr().out.strip())["run_dir"]
        paths.append(f"{run_dir}/report.csv")
    assert open(paths[0], "rb").read() == open(paths[1], "rb").read()
    assert paths[0].split("/")[-2] == paths[1].split("/")[-2]  # same config hash and seed
    assert paths[0].split("/")[-2].endswith("-s7")


def test_eval_attack_and_diag(cfg_path, trained, tmp_path, capsys):
    ck = f"{trained}/checkpoint_final.psd"
    assert run(["eval", "--config", str(cfg_path), "--checkpoint", ck, "--out", str(tmp_path / "m.csv")]) == 0
    metrics = {r["metric"]: float(r["value"]) for r in read_csv((tmp_path / "m.csv").read_text())}
    assert list(metrics) == ["top1", "top5", "ece", "brier", "aurc", "fpr95"]

    assert run(["attack", "--config", str(cfg_path), "--checkpoint", ck, "--epsilon", "0", "0.05", "--steps", "1", "3"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert [(r["method"], r["epsilon"]) for r in rows] == [
        ("fgsm", "0.000000"), ("fgsm", "0.050000"), ("i-fgsm", "0.000000"), ("i-fgsm", "0.050000"),
    ]  # fmt: skip
    for r in rows:
        assert float(r["max_linf"]) <= float(r["epsilon"]) + 1e-12
        if float(r["epsilon"]) == 0:
            assert float(r["accuracy"]) == pytest.approx(metrics["top1"], abs=1e-12)

    out = tmp_path / "diag"
    assert run(["diag", "--config", str(cfg_path), "--checkpoint", ck, "--out", str(out)]) == 0
    grads = read_csv((out / "layer_grads.csv").read_text())
    assert {r["mode"] for r in grads} == {"hard_label", "self_distill"}
    assert [r["layer"] for r in grads if r["mode"] == "hard_label"][0] == "conv1.weight"
    gaps = read_csv((out / "confidence_gap.csv").read_text())
    assert [r["pairs"] for r in gaps] == ["no_swap", "swap"]
    trend = read_csv((out / "trend.csv").read_text())
    assert [int(r["epoch"]) for r in trend] == [1, 2]


def test_attack_dump_and_limit(cfg_path, trained, tmp_path, capsys):
    ck = f"{trained}/checkpoint_final.psd"
    dump = tmp_path / "adv"
    code = run(["attack", "--config", str(cfg_path), "--checkpoint", ck, "--epsilon", "0.01", "--steps", "1", "--limit", "5", "--dump", str(dump)])
    assert code == 0
    adv = load_tensors(dump / "adv_s1_e0.01.psd")["images"]
    assert adv.shape == (5, 1, 16, 16)


def test_resume_matches_uninterrupted(cfg_path, tmp_path, capsys):
    full = tmp_path / "full"
    assert run(["train", "--config", str(cfg_path), "--output-dir", str(full), "--keep-epochs"]) == 0
    run_dir = json.loads(capsys.readouterr().out.strip())["run_dir"]
    part = tmp_path / "part"
    args = ["train", "--config", str(cfg_path), "--output-dir", str(part), "--resume", f"{run_dir}/checkpoint_epoch001.psd"]
    assert run(args) == 0
    resumed = json.loads(capsys.readouterr().out.strip())["run_dir"]
    assert open(f"{run_dir}/report.csv").read() == open(f"{resumed}/report.csv").read()


def test_gen_data(cfg_path, tmp_path, capsys):
    assert run(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info == {"train": 48, "test": 24, "dir": str(tmp_path / "d")}
    t = load_tensors(tmp_path / "d" / "train.psd")
    assert t["images"].shape == (48, 1, 16, 16) and t["labels"].dtype == np.uint64


def test_sweep_emits_one_row_per_cell(cfg_path, tmp_path, capsys):
    out = tmp_path / "heat.csv"
    args = ["sweep", "--config", str(cfg_path), "--p-r", "0", "0.5", "--grid", "2", "4", "--epochs", "1", "--out", str(out)]
    assert run(args) == 0
    rows = read_csv(out.read_text())
    assert len(rows) == 4
    assert [(r["p_r"], r["grid"], r["m"]) for r in rows] == [
        ("0.000000", "2", "8"), ("0.000000", "4", "4"), ("0.500000", "2", "8"), ("0.500000", "4", "4"),
    ]  # fmt: skip
    assert all(v != "" and v != "nan" for r in rows for v in r.values())


def test_sweep_rejects_grid_that_does_not_divide(cfg_path, capsys):
    assert run(["sweep", "--config", str(cfg_path), "--grid", "3", "--epochs", "1", "--out", "-"]) == 2


def test_parser_documents_every_subcommand():
    text = build_parser().format_help()
    for cmd in ("gen-data", "train", "eval", "attack", "diag", "sweep"):
        assert cmd in text
