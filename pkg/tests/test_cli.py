import csv
import json

import numpy as np
import pytest

from oracles import brute_force_pairs
from pcnet.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, LOCK_NAME, main
from pcnet.training import read_metrics

TINY = ["--dataset", "synth", "--synth-classes", "4", "--synth-per-class", "12", "--input-size", "16",
        "--channels", "4,8", "--P", "4", "--K", "3", "--train-fraction", "0.5", "--seed", "7"]


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("PCNET_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture
def trained(tmp_path):
    run = tmp_path / "trained"
    assert main(["train", *TINY, "--epochs", "2", "--run-dir", str(run)]) == EXIT_OK
    return run


def test_train_writes_run_directory(trained):
    rows = read_metrics(trained / "metrics.csv")
    assert [r["epoch"] for r in rows] == [1, 2]
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 7 and manifest["dataset_size"] == 48
    assert manifest["config"]["epochs"] == "2" and len(manifest["dataset_fingerprint"]) > 8
    assert (trained / "checkpoint.pcn").exists() and (trained / "split.csv").exists()
    assert not (trained / LOCK_NAME).exists()


def test_default_run_dir_under_output_root(output_root):
    assert main(["train", *TINY, "--epochs", "1"]) == EXIT_OK
    (run,) = output_root.glob("train-*")
    assert (run / "metrics.csv").exists()


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 5\nlambda = 0.5\n")
    run = tmp_path / "r"
    assert main(["train", *TINY, "--config", str(cfg), "--set", "epochs=3", "--epochs", "1",
                 "--run-dir", str(run)]) == EXIT_OK
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == "1" and manifest["config"]["lambda"] == "0.5"


@pytest.mark.parametrize("argv", [
    ["train", "--dataset", "/nonexistent/folder"],
    ["train", *TINY, "--set", "learning_rate=0.1"],
    ["train", *TINY, "--metric", "manhattan"],
    ["train", "--no-such-flag"],
    ["synth", "--classes", "99"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_missing_checkpoint_is_io_error(tmp_path):
    assert main(["eval", str(tmp_path / "none.pcn")]) == EXIT_IO


def test_eval_and_class_mismatch(trained, tmp_path, capsys):
    assert main(["eval", str(trained / "checkpoint.pcn"), "--run-dir", str(tmp_path / "e")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "OA=" in out and "inference_equivalence=ok" in out
    assert (tmp_path / "e" / "confusion.csv").exists()
    synth = tmp_path / "five"
    assert main(["synth", "--classes", "5", "--per-class", "3", "--size", "16", "--out", str(synth)]) == EXIT_OK
    code = main(["eval", str(trained / "checkpoint.pcn"), "--dataset", str(synth / "images")])
    assert code == EXIT_USAGE
    assert "N=4" in capsys.readouterr().err


def test_locked_run_dir(trained):
    (trained / LOCK_NAME).write_text("123")
    assert main(["train", *TINY, "--epochs", "1", "--run-dir", str(trained)]) == EXIT_USAGE


@pytest.mark.parametrize("metric,strategy", [("euclidean", "SS"), ("cosine", "SD")])
def test_pairs_matches_oracle(tmp_path, metric, strategy):
    run = tmp_path / "p"
    assert main(["pairs", *TINY, "--metric", metric, "--strategy", strategy, "--run-dir", str(run)]) == EXIT_OK
    feats = np.loadtxt(run / "features.csv", delimiter=",")
    batch = list(csv.DictReader(open(run / "batch.csv")))
    ids = [int(r["dataset_index"]) for r in batch]
    labels = [int(r["label"]) for r in batch]
    intra, inter, d_intra, d_inter = brute_force_pairs(feats, labels, metric, strategy)
    rows = list(csv.DictReader(open(run / "pairs.csv")))
    assert [int(r["anchor_id"]) for r in rows] == ids
    assert [int(r["intra_id"]) for r in rows] == [ids[j] for j in intra]
    assert [int(r["inter_id"]) for r in rows] == [ids[j] for j in inter]
    np.testing.assert_allclose([float(r["intra_dist"]) for r in rows], d_intra, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose([float(r["inter_dist"]) for r in rows], d_inter, rtol=1e-9, atol=1e-12)


def test_pairs_explicit_indices_and_singleton(tmp_path, capsys):
    run = tmp_path / "p"
    assert main(["pairs", *TINY, "--indices", "0,1,12,13", "--run-dir", str(run)]) == EXIT_OK
    assert main(["pairs", *TINY, "--indices", "0,1,12"]) == EXIT_USAGE
    assert "occurs once" in capsys.readouterr().err


def test_synth_tree(tmp_path):
    out = tmp_path / "s"
    assert main(["synth", "--classes", "4", "--per-class", "2", "--size", "16", "--out", str(out)]) == EXIT_OK
    assert len(list((out / "images").rglob("*.png"))) == 8
    assert main(["synth", "--classes", "4", "--per-class", "2", "--out", str(out)]) == EXIT_USAGE


def test_export_attention(trained, tmp_path):
    run = tmp_path / "x"
    assert main(["export-attn", str(trained / "checkpoint.pcn"), "0", "5", "--run-dir", str(run)]) == EXIT_OK
    for name in ("self1", "self2", "mut"):
        assert (run / f"{name}.png").exists() and (run / f"{name}.csv").exists()
    assert main(["export-attn", str(trained / "checkpoint.pcn"), "0", "500"]) == EXIT_USAGE


def test_ablate_subset(tmp_path, capsys):
    run = tmp_path / "a"
    assert main(["ablate", *TINY, "--epochs", "1", "--rows", "arch:baseline,arch:pcnet", "--run-dir", str(run)]) == 0
    assert "delta" in capsys.readouterr().out
    assert len(list(csv.reader(open(run / "ablation.csv")))) == 4


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "1", "--no-composite"]) == EXIT_OK
    assert "conv2d" in capsys.readouterr().out


def test_resume_after_stop(tmp_path):
    straight, split_run = tmp_path / "s", tmp_path / "r"
    assert main(["train", *TINY, "--epochs", "3", "--run-dir", str(straight)]) == EXIT_OK
    assert main(["train", *TINY, "--epochs", "3", "--stop-after", "1", "--run-dir", str(split_run)]) == EXIT_OK
    assert main(["train", "--resume", str(split_run / "checkpoint.pcn")]) == EXIT_OK
    assert (straight / "metrics.csv").read_bytes() == (split_run / "metrics.csv").read_bytes()
    assert (straight / "checkpoint.pcn").read_bytes() == (split_run / "checkpoint.pcn").read_bytes()
