"""Toy CNN classifier used as the attack's source model."""

from __future__ import annotations

import torch
import torch.nn as nn


class ToyCNN(nn.Module):
    """Conv trunk + global average pool + linear head.

    ``cam_layer`` is the module whose output feeds GradCAM (the rectified
    output of the last convolution).
    """

    def __init__(self, n_classes: int = 2, image_size: int = 32, width: int = 16, in_ch: int = 3):
        super().__init__()
        self.config = dict(n_classes=n_classes, image_size=image_size, width=width, in_ch=in_ch)
        self.image_size = image_size
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(in_ch, w, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(),
        )
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(2 * w, n_classes))
        self.register_buffer("mean", torch.zeros(1, in_ch, 1, 1))
        self.register_buffer("std", torch.ones(1, in_ch, 1, 1))

    @property
    def cam_layer(self) -> nn.Module:
        return self.features[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features((x - self.mean) / self.std))

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        return self.head[:-1](self.features((x - self.mean) / self.std))
