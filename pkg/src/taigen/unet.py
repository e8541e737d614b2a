"""Small U-Net noise predictor with self-attention at the bottleneck only.

The last self-attention layer of the middle block stores its softmax weights
on every forward pass; :func:`model_predict` returns them next to the noise
prediction.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class EpsilonOutput(NamedTuple):
    epsilon: torch.Tensor
    attention: torch.Tensor  # (B, HW, HW), rows sum to 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None].to(t.device)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Single-head spatial self-attention. Keeps the last attention weights."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = _norm(ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)
        self.last_attention = None

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        self.last_attention = attn
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class MiddleBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int, n_attn: int = 1):
        super().__init__()
        if n_attn < 1:
            raise ValueError("the middle block needs at least one self-attention layer")
        self.res_in = ResBlock(ch, ch, emb_dim)
        self.attn = nn.ModuleList(SelfAttention(ch) for _ in range(n_attn))
        self.res_out = ResBlock(ch, ch, emb_dim)

    def forward(self, x, emb):
        x = self.res_in(x, emb)
        for a in self.attn:
            x = a(x)
        return self.res_out(x, emb)

    @property
    def tap(self) -> SelfAttention:
        return self.attn[-1]


class ToyUNet(nn.Module):
    """Noise predictor eps(x_t, t).

    ``channels`` lists the width at each resolution; the image is downsampled
    by 2 between consecutive entries and the middle block runs at the lowest
    resolution.
    """

    def __init__(
        self,
        image_size: int = 32,
        in_ch: int = 3,
        channels: Sequence[int] = (32, 64, 64),
        emb_dim: int = 128,
        n_mid_attn: int = 1,
    ):
        super().__init__()
        channels = list(channels)
        if not 2 <= len(channels) <= 4:
            raise ValueError("use 2 to 4 resolutions")
        if image_size % 2 ** (len(channels) - 1):
            raise ValueError("image_size must be divisible by the total downsampling factor")
        self.config = dict(
            image_size=image_size, in_ch=in_ch, channels=channels, emb_dim=emb_dim, n_mid_attn=n_mid_attn
        )
        self.image_size = image_size
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(in_ch, channels[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = channels[0]
        for i, ch in enumerate(channels):
            self.down.append(ResBlock(prev, ch, emb_dim))
            prev = ch
            if i < len(channels) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = MiddleBlock(prev, emb_dim, n_mid_attn)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, ch in reversed(list(enumerate(channels))):
            self.up.append(ResBlock(prev + ch, ch, emb_dim))
            prev = ch
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
        self.norm_out = _norm(prev)
        self.conv_out = nn.Conv2d(prev, in_ch, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim))
        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def model_predict(model: nn.Module, x_t: torch.Tensor, t) -> EpsilonOutput:
    """Noise prediction plus the middle-block attention of the same pass."""
    mid = getattr(model, "mid", None)
    if not isinstance(mid, MiddleBlock):
        raise TypeError("model has no middle block with self-attention")
    if not torch.is_tensor(t):
        t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
    eps = model(x_t, t)
    return EpsilonOutput(eps, mid.tap.last_attention)
