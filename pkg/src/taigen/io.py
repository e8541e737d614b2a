"""Checkpoints, run manifests, images and CSV tables."""

from __future__ import annotations

import csv
import hashlib
import platform
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .classifier import ToyCNN
from .data import to_uint8
from .diffusion import NoiseSchedule
from .unet import ToyUNet

MANIFEST_VERSION = 1


class CheckpointError(RuntimeError):
    """Missing, corrupt or mismatched checkpoint."""


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save_checkpoint(path: str | Path, kind: str, model: torch.nn.Module, extra: Optional[dict] = None) -> str:
    """Write ``{kind, model_config, state_dict, **extra}``; returns the file hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"kind": kind, "model_config": dict(model.config), "state_dict": model.state_dict()}
    payload.update(extra or {})
    torch.save(payload, path)
    return sha256_file(path)


def _load(path: str | Path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != kind:
        raise CheckpointError(f"checkpoint {path} is not a {kind} checkpoint")
    return payload


def load_ddpm(path: str | Path) -> tuple[ToyUNet, NoiseSchedule]:
    payload = _load(path, "ddpm")
    try:
        model = ToyUNet(**payload["model_config"])
        model.load_state_dict(payload["state_dict"])
        schedule = NoiseSchedule.from_dict(payload["schedule"])
    except (KeyError, RuntimeError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match the model: {exc}") from exc
    return model.eval(), schedule


def load_classifier(path: str | Path) -> ToyCNN:
    payload = _load(path, "classifier")
    try:
        model = ToyCNN(**payload["model_config"])
        model.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match the model: {exc}") from exc
    return model.eval()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def save_png(path: str | Path, image: torch.Tensor) -> None:
    Image.fromarray(to_uint8(image)).save(path, optimize=False)


def write_yaml(path: str | Path, data: dict) -> None:
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def write_manifest(
    out_dir: str | Path,
    command: str,
    cfg: dict,
    cfg_hash: str,
    artifacts: Sequence[str],
    inputs: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> Path:
    """Record everything needed to rerun a command.

    ``artifacts`` are paths relative to ``out_dir``; ``inputs`` maps names to
    consumed files (checkpoints), stored with their hashes. No timestamps, so
    reruns produce identical manifests.
    """
    out_dir = Path(out_dir)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "command": command,
        "seed": cfg["seed"],
        "dataset": cfg["dataset"],
        "config_hash": cfg_hash,
        "config": cfg,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in (inputs or {}).items()},
        "artifacts": {a: sha256_file(out_dir / a) for a in sorted(artifacts)},
        "environment": {"torch": str(torch.__version__), "numpy": str(np.__version__), "python": platform.python_version()},
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.yaml"
    write_yaml(path, manifest)
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.yaml"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return yaml.safe_load(path.read_text())
