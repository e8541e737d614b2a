"""Windowed adversarial sampling: MI-FGSM inside a short reverse-time window,
with GradCAM/attention channel masks deciding where the perturbation lands.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import (
    NoiseSchedule,
    forward_diffuse,
    predict_x0,
    randn_like,
    reverse_step,
    sample,
    schedule_from_betas,
)
from .metrics import psnr, ssim
from .rng import AttackStreams
from .saliency import (
    attention_to_spatial,
    compose_channels,
    gradcam,
    pick_random_target,
    threshold_mask,
)
from .trajectory import LatentTrajectory
from .unet import model_predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    iterations: int = 20
    mu: float = 1.2
    t_start: int = 80
    t_end: int = 60
    omega_threshold: float = 0.9
    phi_threshold: float = 0.9
    eta: float = 1.0
    early_stop: bool = False
    k_target: int = 5
    seed: int = 0
    # "adversarial": z_0 is one reverse step from the adversarial latent;
    # "main": from the running sampling latent, eps still re-predicted on the adversarial one
    z0_source: str = "adversarial"
    # draw separate noise for the in-window reverse step instead of reusing the step's z
    fresh_window_noise: bool = False
    attention_reduce: str = "mean"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.t_start < self.t_end:
            raise ValueError("t_start must be >= t_end")
        for name in ("omega_threshold", "phi_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.k_target < 1:
            raise ValueError("k_target must be >= 1")
        if self.z0_source not in ("adversarial", "main"):
            raise ValueError(f"unknown z0_source {self.z0_source!r}")

    @property
    def alpha_step(self) -> float:
        return self.epsilon / self.iterations

    @property
    def window_steps(self) -> int:
        return self.t_start - self.t_end + 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AttackResult:
    """Batched attack output; every tensor has the batch as leading axis."""

    adversarial: torch.Tensor
    success: torch.Tensor
    steps_used: torch.Tensor
    inner_grad_evals: torch.Tensor
    target_class_used: torch.Tensor
    psnr: torch.Tensor
    ssim: torch.Tensor
    clean_reconstruction: Optional[torch.Tensor] = None
    trajectory: Optional[LatentTrajectory] = None
    counters: dict = field(default_factory=dict)

    def __len__(self):
        return self.adversarial.shape[0]

    def split(self) -> list["AttackResult"]:
        out = []
        for i in range(len(self)):
            sl = slice(i, i + 1)
            out.append(
                AttackResult(
                    self.adversarial[sl], self.success[sl], self.steps_used[sl], self.inner_grad_evals[sl],
                    self.target_class_used[sl], self.psnr[sl], self.ssim[sl],
                    None if self.clean_reconstruction is None else self.clean_reconstruction[sl],
                )
            )
        return out

    @staticmethod
    def concat(results: Sequence["AttackResult"]) -> "AttackResult":
        cat = lambda name: torch.cat([getattr(r, name) for r in results])  # noqa: E731
        clean = None
        if all(r.clean_reconstruction is not None for r in results):
            clean = cat("clean_reconstruction")
        counters = Counter()
        for r in results:
            counters.update(r.counters)
        return AttackResult(
            cat("adversarial"), cat("success"), cat("steps_used"), cat("inner_grad_evals"),
            cat("target_class_used"), cat("psnr"), cat("ssim"), clean, None, dict(counters),
        )


def _ce_logit_grad(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cross-entropy gradient w.r.t. the logits, rescaled per row by 1 / (1 - p_y).

    ``softmax - onehot`` underflows to exactly zero in float32 once the true
    class leads by ~100 logits, which happens on noisy latents. Dividing by
    ``1 - p_y`` gives softmax over the other classes minus the one-hot, which
    never underflows. The per-image positive factor cancels in the L1
    normalisation, so the attack direction is unchanged.
    """
    onehot = F.one_hot(y, logits.shape[1]).bool()
    others = logits.double().masked_fill(onehot, float("-inf")).softmax(1)
    return (others - onehot.double()).to(logits.dtype)


def mifgsm_inner(
    classifier,
    z0: torch.Tensor,
    y: torch.Tensor,
    epsilon: float,
    iterations: int,
    mu: float,
    counter: Optional[Counter] = None,
) -> torch.Tensor:
    """Momentum sign ascent on the cross-entropy of the true label.

    Runs ``iterations`` steps of size ``epsilon / iterations`` starting from a
    zero momentum buffer, so the result stays within ``epsilon`` of ``z0`` in
    l-inf. Iterates are not clamped. A zero gradient leaves its coordinate
    in place (sign(0) = 0).
    """
    alpha = epsilon / iterations
    g = torch.zeros_like(z0)
    delta = torch.zeros_like(z0)
    y = torch.as_tensor(y, device=z0.device).long()
    dims = tuple(range(1, z0.ndim))
    for i in range(iterations):
        z = (z0 + delta).detach().requires_grad_(True)
        with torch.enable_grad():
            logits = classifier(z)
            (grad,) = torch.autograd.grad(logits, z, grad_outputs=_ce_logit_grad(logits.detach(), y))
        if counter is not None:
            counter["grad_evals"] += z0.shape[0]
        if not torch.isfinite(grad).all():
            raise FloatingPointError(f"non-finite classifier gradient at inner iteration {i}")
        l1 = grad.abs().sum(dim=dims, keepdim=True)
        g = mu * g + torch.where(l1 > 0, grad / torch.where(l1 > 0, l1, torch.ones_like(l1)), torch.zeros_like(grad))
        delta = delta + alpha * torch.sign(g)
    # guards against alpha * iterations rounding above epsilon
    out = z0 + delta.clamp(-epsilon, epsilon)
    # the addition itself can round one ulp past the budget when |z0| >> epsilon
    for _ in range(4):
        over = (out - z0).abs() > epsilon
        if not over.any():
            break
        out = torch.where(over, torch.nextafter(out, z0), out)
    return out


def _check_inputs(model, s: NoiseSchedule, classifier, x0: torch.Tensor, cfg: AttackConfig) -> None:
    if not 1 <= cfg.t_end <= cfg.t_start <= s.T:
        raise ValueError(f"window ({cfg.t_start}, {cfg.t_end}) outside [1, {s.T}]")
    for name, m in (("model", model), ("classifier", classifier)):
        size = getattr(m, "image_size", None)
        if size is not None and tuple(x0.shape[-2:]) != (size, size):
            raise ValueError(f"{name} expects {size}x{size} inputs, got {tuple(x0.shape[-2:])}")


def _pick_targets(classifier, x0, y, cfg: AttackConfig, streams: AttackStreams) -> torch.Tensor:
    with torch.no_grad():
        scores = classifier(x0)
    return torch.tensor(
        [pick_random_target(int(y[i]), scores[i], cfg.k_target, streams.target[i]) for i in range(len(y))],
        dtype=torch.long,
    )


def taigen_attack(
    model,
    schedule: NoiseSchedule,
    classifier,
    x0: torch.Tensor,
    y: torch.Tensor,
    cfg: AttackConfig,
    indices: Optional[Sequence[int]] = None,
    with_clean: bool = True,
    record_trajectory: bool = False,
    mask_hook: Optional[Callable[[int, torch.Tensor], torch.Tensor]] = None,
    x_T: Optional[torch.Tensor] = None,
) -> AttackResult:
    """Adversarial image sampling over a batch of inputs.

    The image is noised to x_T, then denoised step by step. Inside
    [t_end, t_start] an adversarial latent runs next to the sampling latent:
    each step it is denoised once (``z_0``), pushed by MI-FGSM (``z_I``), and
    the two are merged per pixel and channel by the composed mask
    (mask 1 keeps ``z_0``, mask 0 takes ``z_I``). At ``t_end`` the adversarial
    latent replaces the sampling latent and plain sampling finishes the chain.

    With ``cfg.early_stop`` the x_0 prediction is classified at every step and
    an image returns as soon as it is misclassified.

    ``indices`` label the images for RNG stream derivation (default
    ``0..B-1``). ``mask_hook(t, C)`` may replace the composed mask, for
    ablations. An explicit ``x_T`` replaces the forward-diffused start.
    """
    y = torch.as_tensor(y).long()
    B = x0.shape[0]
    if len(y) != B:
        raise ValueError("labels and images differ in length")
    _check_inputs(model, schedule, classifier, x0, cfg)
    if record_trajectory and cfg.early_stop:
        raise ValueError("trajectory recording needs the full chain (early_stop=False)")
    s = schedule if cfg.eta == schedule.eta else schedule_from_betas(schedule.beta[1:].tolist(), cfg.eta)
    indices = list(range(B)) if indices is None else list(indices)
    streams = AttackStreams.derive(cfg.seed, indices)
    counter = Counter()

    targets = _pick_targets(classifier, x0, y, cfg, streams)
    G = threshold_mask(gradcam(classifier, x0, targets), cfg.omega_threshold)
    H, W = x0.shape[-2:]

    if x_T is None:
        x_T = forward_diffuse(x0, s.T, randn_like(x0, streams.forward), s)
    elif x_T.shape != x0.shape:
        raise ValueError("x_T and x0 differ in shape")
    x = x_T.clone()
    adv: Optional[torch.Tensor] = None
    out = torch.zeros_like(x0)
    done = torch.zeros(B, dtype=torch.bool)
    steps_used = torch.zeros(B, dtype=torch.long)
    grad_evals = torch.zeros(B, dtype=torch.long)
    states = [x.clone()] if record_trajectory else None

    with torch.no_grad():
        for t in range(s.T, 0, -1):
            idx = torch.nonzero(~done).flatten()
            if idx.numel() == 0:
                break
            z = randn_like(x0, streams.sampling)
            xa = x[idx]
            eps, attn = model_predict(model, xa, t)
            counter["unet_evals"] += idx.numel()
            steps_used[idx] += 1
            if cfg.early_stop:
                x0_hat = predict_x0(xa, t, eps, s).clamp(-1.0, 1.0)
                hit = classifier(x0_hat).argmax(1) != y[idx]
                counter["classifier_forward_evals"] += idx.numel()
                if hit.any():
                    out[idx[hit]] = x0_hat[hit]
                    done[idx[hit]] = True
                    keep = ~hit
                    idx, xa, eps, attn = idx[keep], xa[keep], eps[keep], attn[keep]
                    if idx.numel() == 0:
                        continue
            x_prev = reverse_step(xa, t, eps, z[idx], s)

            in_window = cfg.t_end <= t <= cfg.t_start
            if in_window:
                if adv is None:
                    adv = x.clone()
                adv_a = adv[idx]
                eps_adv, _ = model_predict(model, adv_a, t)
                counter["unet_evals"] += idx.numel()
                zw = randn_like(x0, streams.sampling)[idx] if cfg.fresh_window_noise else z[idx]
                base = adv_a if cfg.z0_source == "adversarial" else xa
                z_0 = reverse_step(base, t, eps_adv, zw, s)
                W_mask = threshold_mask(attention_to_spatial(attn, H, W, cfg.attention_reduce), cfg.phi_threshold)
                C = compose_channels(W_mask, G[idx]).C
                if mask_hook is not None:
                    C = mask_hook(t, C)
                z_I = mifgsm_inner(classifier, z_0, y[idx], cfg.epsilon, cfg.iterations, cfg.mu, counter)
                grad_evals[idx] += cfg.iterations
                adv[idx] = torch.where(C.bool(), z_0, z_I)

            x[idx] = x_prev
            if t == cfg.t_end:
                x[idx] = adv[idx]
            if record_trajectory:
                states.append(adv.clone() if in_window else x.clone())

        rest = torch.nonzero(~done).flatten()
        out[rest] = x[rest].clamp(-1.0, 1.0)
        success = classifier(out).argmax(1) != y
        counter["classifier_forward_evals"] += B

    clean = None
    if with_clean:
        clean_streams = AttackStreams.derive(cfg.seed, indices)
        clean, _ = sample(model, s, x_T, generator=clean_streams.sampling, record=None)
        counter["unet_evals"] += B * s.T

    traj = LatentTrajectory("reverse", list(range(s.T, -1, -1)), states) if record_trajectory else None
    return AttackResult(
        adversarial=out,
        success=success,
        steps_used=steps_used,
        inner_grad_evals=grad_evals,
        target_class_used=targets,
        psnr=psnr(out, x0).float(),
        ssim=ssim(out, x0).float(),
        clean_reconstruction=clean,
        trajectory=traj,
        counters=dict(counter),
    )


def taigen_attack_early_stop(model, schedule, classifier, x0, y, cfg: AttackConfig, **kwargs) -> AttackResult:
    return taigen_attack(model, schedule, classifier, x0, y, replace(cfg, early_stop=True), **kwargs)


@dataclass
class BatchSummary:
    n_images: int
    asr: float
    psnr_mean: float
    ssim_mean: float
    steps_used_mean: float
    grad_evals_total: int
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def batch_attack(
    model,
    schedule: NoiseSchedule,
    classifier,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: AttackConfig,
    indices: Optional[Sequence[int]] = None,
    batch_size: int = 64,
    with_clean: bool = True,
) -> tuple[list[AttackResult], BatchSummary]:
    """Attack a dataset slice chunk by chunk.

    Each image owns RNG streams derived from ``(cfg.seed, index)``. A chunk
    that raises is retried image by image; images that still fail are listed
    in ``summary.failures`` and left out of the results.
    """
    if len(images) == 0:
        raise ValueError("empty slice")
    indices = list(range(len(images))) if indices is None else list(indices)
    results: list[AttackResult] = []
    failures = []
    for lo in range(0, len(images), batch_size):
        sl = slice(lo, lo + batch_size)
        try:
            r = taigen_attack(model, schedule, classifier, images[sl], labels[sl], cfg, indices[sl], with_clean)
            results.extend(r.split())
        except Exception as exc:  # isolate the failing image(s)
            log.warning("chunk at %d failed (%s); retrying per image", lo, exc)
            for j in range(lo, min(lo + batch_size, len(images))):
                try:
                    r = taigen_attack(
                        model, schedule, classifier, images[j:j + 1], labels[j:j + 1], cfg, [indices[j]], with_clean
                    )
                    results.extend(r.split())
                except Exception as exc2:
                    failures.append((indices[j], f"{type(exc2).__name__}: {exc2}"))
    return results, summarize(results, failures)


def summarize(results: Sequence[AttackResult], failures=()) -> BatchSummary:
    if not results:
        return BatchSummary(0, float("nan"), float("nan"), float("nan"), float("nan"), 0, list(failures))
    succ = np.array([bool(r.success.all()) for r in results])
    return BatchSummary(
        n_images=len(results),
        asr=100.0 * float(succ.mean()),
        psnr_mean=float(np.mean([r.psnr.mean().item() for r in results])),
        ssim_mean=float(np.mean([r.ssim.mean().item() for r in results])),
        steps_used_mean=float(np.mean([r.steps_used.float().mean().item() for r in results])),
        grad_evals_total=int(sum(int(r.inner_grad_evals.sum()) for r in results)),
        failures=list(failures),
    )


def mifgsm_pixel(classifier, x: torch.Tensor, y: torch.Tensor, epsilon: float, iterations: int, mu: float) -> torch.Tensor:
    """Plain image-space MI-FGSM reference, clamped to the [-1, 1] image range."""
    return mifgsm_inner(classifier, x, y, epsilon, iterations, mu).clamp(-1.0, 1.0)
