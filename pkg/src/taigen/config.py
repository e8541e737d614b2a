"""Flat YAML run configuration with strict key checking."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import yaml

from .attack import AttackConfig


class ConfigError(ValueError):
    """Bad or missing configuration key; the CLI maps it to exit code 1."""


REQUIRED = ("dataset",)

DEFAULTS: dict[str, Any] = {
    # data: "shapes" or a directory holding CIFAR-10 python batches
    "dataset": None,
    "data_seed": 0,
    "n_train": 4000,
    "n_test": 512,
    "n_classes": 2,
    "image_size": 32,
    # master seed for training init, sampling and attack streams
    "seed": 0,
    # schedule
    "T": 100,
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "eta": 1.0,
    # noise predictor
    "ddpm_steps": 3000,
    "ddpm_batch_size": 32,
    "ddpm_lr": 2e-3,
    "ddpm_channels": [16, 32, 32],
    "ddpm_emb_dim": 128,
    "ddpm_mid_attn": 1,
    "ddpm_weighted_loss": False,
    "ema_decay": 0.995,
    # classifier
    "clf_steps": 600,
    "clf_batch_size": 64,
    "clf_lr": 3e-3,
    "clf_width": 16,
    # checkpoints consumed by analyze-trajectory / attack / evaluate
    "ddpm_checkpoint": None,
    "classifier_checkpoint": None,
    # attack
    "epsilon": 8 / 255,
    "iterations": 20,
    "mu": 1.2,
    "t_start": 80,
    "t_end": 60,
    "omega_threshold": 0.9,
    "phi_threshold": 0.9,
    "early_stop": False,
    "k_target": 5,
    "z0_source": "adversarial",
    "fresh_window_noise": False,
    "attention_reduce": "mean",
    "slice_start": 0,
    "slice_count": 128,
    "batch_size": 64,
    # trajectory analysis
    "analyze_count": 32,
    "delta_r": 4.0,
    "divergence_rel_tol": 0.05,
    # evaluation
    "purifier": "identity",
    "hist_bins": 32,
}

_ATTACK_KEYS = (
    "epsilon", "iterations", "mu", "t_start", "t_end", "omega_threshold", "phi_threshold",
    "eta", "early_stop", "k_target", "seed", "z0_source", "fresh_window_noise", "attention_reduce",
)


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def parse_config(raw: Optional[dict], overrides: Optional[dict] = None) -> dict:
    """Validate a flat mapping against ``DEFAULTS`` and fill in the rest."""
    raw = dict(raw or {})
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    cfg = copy.deepcopy(DEFAULTS)
    for k, v in raw.items():
        cfg[k] = _coerce(k, v)
    for k in REQUIRED:
        if cfg[k] in (None, ""):
            raise ConfigError(f"missing required config key: {k}")
    return cfg


def load_config(path: Optional[str | Path], overrides: Optional[dict] = None) -> dict:
    """Read a YAML config; a run manifest is accepted and its snapshot reused."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        if "manifest_version" in raw:
            raw = raw.get("config") or {}
    return parse_config(raw, overrides)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def attack_config(cfg: dict) -> AttackConfig:
    try:
        return AttackConfig(**{k: cfg[k] for k in _ATTACK_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
