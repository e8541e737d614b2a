"""Datasets: a procedural shapes corpus and a CIFAR-10 style batch loader.

Images are float32 tensors in model scale [-1, 1], shape (N, 3, H, W).
"""

from __future__ import annotations

import pickle
from pathlib import Path

import numpy as np
import torch

SHAPE_NAMES = ("circle", "square", "triangle", "cross")


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def make_shapes(
    n: int, seed: int, image_size: int = 32, n_classes: int = 2
) -> tuple[torch.Tensor, torch.Tensor]:
    """Procedural labelled shapes on coloured backgrounds.

    Class ``k`` is ``SHAPE_NAMES[k]``. Labels are balanced and shuffled;
    position, size and colours are random. Deterministic in ``seed``.
    """
    if n < 1:
        raise ValueError("dataset must be nonempty")
    if image_size < 12:
        raise ValueError("image_size must be >= 12 to fit the shapes")
    if not 2 <= n_classes <= len(SHAPE_NAMES):
        raise ValueError(f"n_classes must be in [2, {len(SHAPE_NAMES)}]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % n_classes)
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i, y in enumerate(labels):
        r = rng.uniform(0.25, 0.38) * image_size
        cy, cx = rng.uniform(r + 1, image_size - r - 1, size=2)
        bg = rng.uniform(-1.0, 0.2, size=3)
        fg = rng.uniform(-0.2, 1.0, size=3)
        # keep a minimum contrast between shape and background
        if np.abs(fg - bg).max() < 0.6:
            fg = np.clip(bg + 0.8, -1.0, 1.0)
        m = _shape_mask(SHAPE_NAMES[y], image_size, cy, cx, r)
        img = np.where(m[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, 0.03, size=img.shape)
        images[i] = np.clip(img, -1.0, 1.0)
    return torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64))


def load_cifar_batches(root: str | Path, split: str = "test") -> tuple[torch.Tensor, torch.Tensor]:
    """Read the python-pickle CIFAR-10 layout (``data_batch_*`` / ``test_batch``)."""
    root = Path(root)
    names = ["test_batch"] if split == "test" else [f"data_batch_{i}" for i in range(1, 6)]
    xs, ys = [], []
    for name in names:
        path = root / name
        if not path.exists():
            raise FileNotFoundError(f"dataset: {path} not found")
        with open(path, "rb") as f:
            d = pickle.load(f, encoding="bytes")
        xs.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(d[b"labels"], dtype=np.int64))
    x = torch.from_numpy(np.concatenate(xs)).float() / 127.5 - 1.0
    return x, torch.from_numpy(np.concatenate(ys))


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Model-scale (C, H, W) image to an (H, W, C) byte array."""
    x = ((x.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return x.permute(1, 2, 0).numpy()
