import csv

import numpy as np
import pytest
import yaml

from taigen.cli import main
from taigen.config import ConfigError, load_config, parse_config
from taigen.io import read_manifest, sha256_file

TINY = {
    "dataset": "shapes",
    "n_train": 64,
    "n_test": 16,
    "image_size": 16,
    "T": 10,
    "beta_start": 1e-3,
    "beta_end": 0.2,
    "ddpm_steps": 6,
    "ddpm_batch_size": 8,
    "ddpm_channels": [8, 16],
    "ddpm_emb_dim": 16,
    "clf_steps": 5,
    "clf_batch_size": 16,
    "clf_width": 4,
    "t_start": 7,
    "t_end": 5,
    "iterations": 2,
    "slice_count": 4,
    "batch_size": 3,
    "analyze_count": 4,
    "hist_bins": 8,
}


def _write(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "run.yaml", TINY)
    assert main(["train-ddpm", "--config", str(cfg), "--out", str(root / "ddpm")]) == 0
    assert main(["train-classifier", "--config", str(cfg), "--out", str(root / "clf")]) == 0
    full = dict(TINY, ddpm_checkpoint=str(root / "ddpm" / "ddpm.pt"),
                classifier_checkpoint=str(root / "clf" / "classifier.pt"))
    return root, _write(root / "attack.yaml", full)


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_config_strict_keys():
    with pytest.raises(ConfigError, match="unknown config key: bogus"):
        parse_config({"dataset": "shapes", "bogus": 1})
    with pytest.raises(ConfigError, match="dataset"):
        parse_config({})
    with pytest.raises(ConfigError, match="iterations"):
        parse_config({"dataset": "shapes", "iterations": "many"})
    assert parse_config({"dataset": "shapes", "epsilon": 0})["epsilon"] == 0.0


def test_config_reads_manifest(trained):
    root, _ = trained
    cfg = load_config(root / "ddpm" / "manifest.yaml")
    assert cfg["ddpm_steps"] == TINY["ddpm_steps"]


def test_exit_codes(tmp_path):
    assert main(["train-ddpm", "--out", str(tmp_path)]) == 1  # dataset missing
    bad = _write(tmp_path / "bad.yaml", {"dataset": "shapes", "nope": 3})
    assert main(["train-ddpm", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["no-such-command"]) == 1
    missing = _write(tmp_path / "m.yaml", dict(TINY, ddpm_checkpoint=str(tmp_path / "none.pt"),
                                               classifier_checkpoint=str(tmp_path / "none.pt")))
    assert main(["attack", "--config", str(missing), "--out", str(tmp_path / "a")]) == 2
    corrupt = tmp_path / "corrupt.pt"
    corrupt.write_bytes(b"not a checkpoint")
    c = _write(tmp_path / "c.yaml", dict(TINY, ddpm_checkpoint=str(corrupt)))
    assert main(["analyze-trajectory", "--config", str(c), "--out", str(tmp_path / "t")]) == 2
    cifar = _write(tmp_path / "cifar.yaml", dict(TINY, dataset=str(tmp_path / "nowhere")))
    assert main(["train-classifier", "--config", str(cifar), "--out", str(tmp_path / "x")]) == 2


def test_train_outputs(trained, tmp_path):
    root, _ = trained
    assert len(_rows(root / "ddpm" / "loss.csv")) == TINY["ddpm_steps"]
    m = read_manifest(root / "ddpm")
    assert m["artifacts"]["ddpm.pt"] == sha256_file(root / "ddpm" / "ddpm.pt")
    acc = yaml.safe_load((root / "clf" / "accuracy.yaml").read_text())["test_accuracy"]
    assert 0 <= acc <= 100
    # rerun with the same seed reproduces the checkpoint bit for bit
    cfg = root / "run.yaml"
    assert main(["train-ddpm", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert sha256_file(tmp_path / "again" / "ddpm.pt") == sha256_file(root / "ddpm" / "ddpm.pt")
    assert main(["train-ddpm", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "other")]) == 0
    assert sha256_file(tmp_path / "other" / "ddpm.pt") != sha256_file(root / "ddpm" / "ddpm.pt")


def test_analyze_trajectory(trained, tmp_path):
    _, cfg = trained
    assert main(["analyze-trajectory", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rad = _rows(tmp_path / "radius.csv")
    assert [int(r["t"]) for r in rad] == list(range(TINY["T"], -1, -1))
    win = yaml.safe_load((tmp_path / "window.yaml").read_text())
    assert 1 <= win["t_mixing"] <= TINY["T"]
    assert win["t_start"] >= win["t_end"] >= 1
    div = _rows(tmp_path / "divergence.csv")
    # reverse chain shares the forward chain's x_T, so the angle at T is zero
    assert float(div[0]["clean"]) == pytest.approx(0.0, abs=1e-6)
    assert (tmp_path / "divergence.png").exists()


def test_attack_and_evaluate(trained, tmp_path):
    _, cfg = trained
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["attack", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["attack", "--config", str(cfg), "--out", str(b)]) == 0
    ma, mb = read_manifest(a), read_manifest(b)
    assert ma["artifacts"] == mb["artifacts"]  # same seed: identical content
    rows = _rows(a / "results.csv")
    assert len(rows) == TINY["slice_count"]
    summary = yaml.safe_load((a / "summary.yaml").read_text())
    assert summary["grad_evals_total"] == TINY["slice_count"] * 3 * TINY["iterations"]

    ev = tmp_path / "eval"
    assert main(["evaluate", str(a), "--out", str(ev)]) == 0
    m = _rows(ev / "metrics.csv")
    succ = np.mean([int(r["success"]) for r in rows]) * 100
    text = (ev / "summary.txt").read_text()
    assert f"asr (all): {succ:.2f}" in text
    assert f"robust accuracy [identity]: {100 - succ:.2f}" in text
    # the attack stores float32 values, evaluation recomputes in float64
    assert [float(r["psnr"]) for r in m] == pytest.approx([float(r["psnr"]) for r in rows], abs=1e-5)
    hist = _rows(ev / "histograms.csv")
    assert len(hist) == 3 * TINY["hist_bins"]

    same = tmp_path / "same"
    assert main(["evaluate", str(a), "--images", "clean", "--reference", "clean", "--out", str(same)]) == 0
    m = _rows(same / "metrics.csv")
    assert all(float(r["psnr"]) == 99.0 and float(r["ssim"]) == pytest.approx(1.0) for r in m)


def test_attack_eps_zero_matches_clean(trained, tmp_path):
    _, cfg = trained
    assert main(["attack", "--config", str(cfg), "--epsilon", "0", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "results.csv")
    assert all(r["adv_pred"] == r["clean_pred"] for r in rows)
    arr = np.load(tmp_path / "arrays.npz")
    assert np.array_equal(arr["adversarial"], arr["clean"])


def test_attack_early_stop_reduces_steps(trained, tmp_path):
    _, cfg = trained
    assert main(["attack", "--config", str(cfg), "--early-stop", "--out", str(tmp_path / "e")]) == 0
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
    e = yaml.safe_load((tmp_path / "e" / "summary.yaml").read_text())
    f = yaml.safe_load((tmp_path / "f" / "summary.yaml").read_text())
    assert e["reverse_steps_total"] <= f["reverse_steps_total"] == TINY["slice_count"] * TINY["T"]


def test_attack_workers(trained, tmp_path):
    _, cfg = trained
    assert main(["attack", "--config", str(cfg), "--workers", "2", "--out", str(tmp_path / "w")]) == 0
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    w = np.load(tmp_path / "w" / "arrays.npz")
    s = np.load(tmp_path / "s" / "arrays.npz")
    assert np.array_equal(w["indices"], s["indices"])
    np.testing.assert_allclose(w["adversarial"], s["adversarial"], atol=1e-4)
