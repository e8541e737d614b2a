import shutil
from pathlib import Path

import pytest
import torch

from taigen.cli import main
from taigen.config import config_hash, load_config
from taigen.io import load_classifier, load_ddpm, read_manifest, sha256_file

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.yaml"

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, name = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    if rep.when == "call" or status == "FAIL":
        _criteria[n] = (name, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, status, detail = _criteria[n]
        line = f"criterion {n:2d} [{name}]: {status}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))


def _cached_run(cache_dir: Path, command: str, cfg_path: Path, artifact: str) -> Path:
    """Run a training command once per config and reuse its output directory."""
    cfg = load_config(cfg_path)
    out = cache_dir / f"{command}-{config_hash(cfg)}-{torch.__version__}"
    ckpt = out / artifact
    if ckpt.exists():
        m = read_manifest(out)
        if m["artifacts"].get(artifact) == sha256_file(ckpt):
            return ckpt
        shutil.rmtree(out)
    torch.set_num_threads(1)
    assert main([command, "--config", str(cfg_path), "--out", str(out)]) == 0
    return ckpt


@pytest.fixture(scope="session")
def toy_paths(request):
    """Checkpoints of the shipped toy config, trained through the CLI and cached."""
    cache_dir = Path(request.config.cache.mkdir("taigen-toy"))
    clf = _cached_run(cache_dir, "train-classifier", TOY_CONFIG, "classifier.pt")
    ddpm = _cached_run(cache_dir, "train-ddpm", TOY_CONFIG, "ddpm.pt")
    return ddpm, clf


@pytest.fixture(scope="session")
def toy(toy_paths):
    torch.set_num_threads(1)
    ddpm_path, clf_path = toy_paths
    model, schedule = load_ddpm(ddpm_path)
    clf = load_classifier(clf_path)
    cfg = load_config(TOY_CONFIG)
    return {"model": model, "schedule": schedule, "classifier": clf, "config": cfg,
            "ddpm_path": ddpm_path, "clf_path": clf_path}
