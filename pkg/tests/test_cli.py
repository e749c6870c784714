import csv
import json
import subprocess
import sys

import pytest

from bradcn.cli import run

SMALL = ["--set", "embed_dim=32", "--set", "num_transformer_blocks=1", "--set", "num_heads=2",
         "--set", "fusion_channels=16", "--set", "adcn_base_channels=8", "--set", "depth_base_channels=8"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--n", "4", "--out", str(d / "data"), "--size", "64x64"]) == 0
    assert run(["pretrain-adcn", "--data", str(d / "data"), "--steps", "2", "--size", "64x64",
                "--out", str(d / "adcn.ckpt"), *SMALL]) == 0
    assert run(["train", "--data", str(d / "data"), "--ckpt", str(d / "adcn.ckpt"), "--steps", "2",
                "--size", "64x64", "--out", str(d / "hybrid.ckpt")]) == 0
    return d


def test_end_to_end_subprocess(tmp_path):
    def cli(*args):
        return subprocess.run([sys.executable, "-m", "bradcn", *args], capture_output=True, text=True, timeout=300)

    assert cli("synth", "--n", "4", "--out", str(tmp_path / "d")).returncode == 0
    r = cli("pretrain-adcn", "--data", str(tmp_path / "d"), "--steps", "50", "--out", str(tmp_path / "a.ckpt"), *SMALL)
    assert r.returncode == 0, r.stderr
    assert cli("synth", "--n", "1", "--out", str(tmp_path / "e"), "--bogus").returncode == 1
    assert cli("render", "--ckpt", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "o.png"),
               str(tmp_path / "d" / "original" / "synth0_0000.png")).returncode == 2


def test_train_writes_loss_log(work):
    rows = list(csv.DictReader(open(str(work / "hybrid.ckpt") + ".losses.csv")))
    assert [r["loss_name"] for r in rows if r["loss_name"].startswith("train")] == ["train_l1"] * 2


def test_prepare_default_split_counts_error(work, tmp_path):
    # four samples cannot hold the published split sizes
    assert run(["prepare", "--data", str(work / "data"), "--out", str(tmp_path / "m")]) == 2


def test_prepare_eval_with_manifest(work, tmp_path):
    assert run(["prepare", "--data", str(work / "data"), "--out", str(tmp_path / "m"),
                "--train-count", "3", "--test-count", "1", "--seed", "2"]) == 0
    assert len((tmp_path / "m" / "test.txt").read_text().splitlines()) == 2
    out = tmp_path / "metrics.csv"
    assert run(["eval", "--data", str(work / "data"), "--ckpt", str(work / "hybrid.ckpt"),
                "--manifest", str(tmp_path / "m"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 2 and rows[-1]["image_id"] == "mean"


def test_prepare_needs_both_counts(work, tmp_path):
    assert run(["prepare", "--data", str(work / "data"), "--out", str(tmp_path / "m"), "--train-count", "3"]) == 1


def test_resume_verb(work, tmp_path):
    assert run(["train", "--data", str(work / "data"), "--resume", str(work / "hybrid.ckpt"), "--steps", "2",
                "--size", "64x64", "--out", str(tmp_path / "r.ckpt")]) == 0


def test_ablate(work, tmp_path):
    out = tmp_path / "abl.csv"
    assert run(["ablate", "--data", str(work / "data"), "--ckpt", str(work / "adcn.ckpt"), "--steps", "1",
                "--size", "64x64", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["method"] for r in rows] == ["RenderOnly", "RenderPlusDepth", "Full"]


def test_render_bitwise_stable(work, tmp_path):
    img = str(work / "data" / "original" / "synth0_0000.png")
    outs = []
    for i in range(2):
        out = tmp_path / f"r{i}.png"
        assert run(["render", "--ckpt", str(work / "hybrid.ckpt"), "--out", str(out), img]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_config_file_and_bad_override(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"embed_dim": 32, "num_heads": 2, "num_transformer_blocks": 1}))
    args = ["pretrain-adcn", "--data", str(work / "data"), "--steps", "1", "--size", "64x64",
            "--out", str(tmp_path / "a.ckpt"), "--config", str(cfg)]
    assert run(args) == 0
    assert run(args + ["--set", "nope=1"]) == 1


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["synth", "--n", "x", "--out", "o"],
                                  ["synth", "--n", "1", "--out", "o", "--size", "9by9"]])
def test_usage_errors(argv):
    assert run(argv) == 1


def test_missing_data_dir(tmp_path):
    assert run(["pretrain-adcn", "--data", str(tmp_path / "none"), "--steps", "1"]) == 2


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "pretrain-adcn" in capsys.readouterr().out
