"""GradCAM, attention spatialisation, thresholding and the RGB mask composition."""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class MaskSet(NamedTuple):
    W_mask: torch.Tensor  # (..., h, w), from attention, drives red
    G_mask: torch.Tensor  # (..., h, w), from GradCAM, drives green and blue
    C: torch.Tensor  # (..., 3, h, w)


def pick_random_target(
    true_label: int, class_scores: torch.Tensor, k: int, rng: torch.Generator
) -> int:
    """Uniform draw among the ``k`` best-scoring classes other than the true one."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = torch.as_tensor(class_scores).detach().reshape(-1).double()
    if scores.numel() < 2:
        raise ValueError("need at least two classes")
    scores = scores.clone()
    scores[int(true_label)] = -float("inf")
    k = min(k, scores.numel() - 1)
    eligible = torch.topk(scores, k).indices
    return int(eligible[torch.randint(k, (1,), generator=rng)])


def find_cam_layer(classifier: nn.Module, layer: Optional[nn.Module] = None) -> nn.Module:
    if layer is not None:
        return layer
    cam = getattr(classifier, "cam_layer", None)
    if isinstance(cam, nn.Module):
        return cam
    convs = [m for m in classifier.modules() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise TypeError("classifier has no convolutional feature layer")
    return convs[-1]


def gradcam_weights(
    classifier: nn.Module,
    x: torch.Tensor,
    target_class,
    layer: Optional[nn.Module] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pooled gradients of the target logit w.r.t. the feature maps.

    Returns ``(weights, activations)`` with shapes (B, K) and (B, K, h, w).
    """
    layer = find_cam_layer(classifier, layer)
    captured = []
    handle = layer.register_forward_hook(lambda m, i, o: captured.append(o))
    try:
        with torch.enable_grad():
            logits = classifier(x)
    finally:
        handle.remove()
    if not captured:
        raise RuntimeError("feature layer was not reached in the forward pass")
    acts = captured[-1]
    target = torch.as_tensor(target_class, device=logits.device).reshape(-1).expand(logits.shape[0])
    score = logits.gather(1, target[:, None].long()).sum()
    (grads,) = torch.autograd.grad(score, acts)
    return grads.mean(dim=(2, 3)).detach(), acts.detach()


def normalize_map(m: torch.Tensor) -> torch.Tensor:
    """Per-sample min-max scaling to [0, 1]; constant maps become all zeros."""
    flat = m.reshape(m.shape[0], -1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(flat))
    return out.reshape(m.shape)


def gradcam(
    classifier: nn.Module,
    x0: torch.Tensor,
    target_class,
    layer: Optional[nn.Module] = None,
    normalize: bool = True,
) -> torch.Tensor:
    """GradCAM maps at input resolution, shape (B, H, W)."""
    weights, acts = gradcam_weights(classifier, x0, target_class, layer)
    cam = F.relu((weights[:, :, None, None] * acts).sum(dim=1))
    cam = F.interpolate(cam[:, None], size=x0.shape[-2:], mode="bilinear", align_corners=False)[:, 0]
    # bilinear interpolation of a nonnegative map stays nonnegative
    return normalize_map(cam) if normalize else cam


def attention_to_spatial(
    attention: torch.Tensor, out_h: int, out_w: int, reduce: str = "mean"
) -> torch.Tensor:
    """Collapse (B, HW, HW) attention to a (B, out_h, out_w) map in [0, 1].

    Each key token's saliency is the attention it receives, reduced over the
    query axis.
    """
    b, q, k = attention.shape
    side = int(round(k ** 0.5))
    if side * side != k:
        raise ValueError(f"token count {k} is not a square grid")
    if reduce == "mean":
        per_token = attention.mean(dim=1)
    elif reduce == "max":
        per_token = attention.amax(dim=1)
    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    grid = per_token.reshape(b, 1, side, side)
    up = F.interpolate(grid, size=(out_h, out_w), mode="bilinear", align_corners=False)[:, 0]
    return normalize_map(up)


def threshold_mask(saliency: torch.Tensor, theta: float) -> torch.Tensor:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must be in [0, 1], got {theta}")
    return (saliency > theta).to(saliency.dtype)


def compose_channels(W_mask: torch.Tensor, G_mask: torch.Tensor) -> MaskSet:
    """Stack (W, G, G) along a channel axis inserted before (h, w)."""
    if W_mask.shape != G_mask.shape:
        raise ValueError(f"mask shapes differ: {tuple(W_mask.shape)} vs {tuple(G_mask.shape)}")
    C = torch.stack([W_mask, G_mask, G_mask], dim=-3)
    return MaskSet(W_mask, G_mask, C)
