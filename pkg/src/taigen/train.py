"""Training loops for the toy noise predictor and the toy classifier."""

from __future__ import annotations

import copy
import logging
from typing import Optional

import torch
import torch.nn.functional as F

from .classifier import ToyCNN
from .diffusion import NoiseSchedule
from .unet import ToyUNet

log = logging.getLogger(__name__)


def seeded_init(cls, seed: int, **kwargs):
    """Build a module with parameters drawn from a private RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(**kwargs)


def loss_weights(s: NoiseSchedule) -> torch.Tensor:
    """Per-timestep weights of the variational bound, normalised to mean 1.

    sigma_1 is 0, so t = 1 falls back to sigma^2 = beta.
    """
    beta, alpha, ab = s.beta[1:], s.alpha[1:], s.alpha_bar[1:]
    sig2 = s.sigma[1:] ** 2
    sig2 = torch.where(sig2 > 0, sig2, beta)
    w = beta ** 2 / (2 * sig2 * alpha * (1 - ab))
    w = w / w.mean()
    return torch.cat([torch.zeros(1, dtype=w.dtype), w])


def train_ddpm(
    images: torch.Tensor,
    s: NoiseSchedule,
    steps: int,
    seed: int,
    batch_size: int = 32,
    lr: float = 2e-3,
    weighted: bool = False,
    ema_decay: Optional[float] = 0.995,
    model_kwargs: Optional[dict] = None,
    device: str = "cpu",
) -> tuple[ToyUNet, list[float]]:
    """Fit eps_theta with the unweighted noise-prediction loss.

    Returns the (EMA) model in eval mode and the per-step loss history.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    model_kwargs = dict(model_kwargs or {})
    model_kwargs.setdefault("image_size", images.shape[-1])
    model = seeded_init(ToyUNet, seed, **model_kwargs).to(device)
    ema = copy.deepcopy(model) if ema_decay else None
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    g = torch.Generator().manual_seed(seed)
    weights = loss_weights(s).float()
    losses: list[float] = []
    model.train()
    for step in range(steps):
        idx = torch.randint(len(images), (batch_size,), generator=g)
        x0 = images[idx]
        t = torch.randint(1, s.T + 1, (batch_size,), generator=g)
        noise = torch.randn(x0.shape, generator=g)
        ab = s.alpha_bar[t].float()[:, None, None, None]
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
        x_t, t, noise = x_t.to(device), t.to(device), noise.to(device)
        err = ((model(x_t, t) - noise) ** 2).mean(dim=(1, 2, 3))
        if weighted:
            err = err * weights[t.cpu()].to(device)
        loss = err.mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if ema is not None:
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), model.parameters()):
                    pe.mul_(ema_decay).add_(p.detach(), alpha=1 - ema_decay)
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("ddpm step %d loss %.4f", step, losses[-1])
    out = ema if ema is not None else model
    return out.eval(), losses


def train_classifier(
    images: torch.Tensor,
    labels: torch.Tensor,
    steps: int,
    seed: int,
    batch_size: int = 64,
    lr: float = 3e-3,
    model_kwargs: Optional[dict] = None,
    device: str = "cpu",
) -> tuple[ToyCNN, list[float]]:
    if len(images) == 0:
        raise ValueError("empty dataset")
    model_kwargs = dict(model_kwargs or {})
    model_kwargs.setdefault("n_classes", int(labels.max()) + 1)
    model_kwargs.setdefault("image_size", images.shape[-1])
    model = seeded_init(ToyCNN, seed, **model_kwargs).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    losses = []
    model.train()
    for step in range(steps):
        idx = torch.randint(len(images), (batch_size,), generator=g)
        loss = F.cross_entropy(model(images[idx].to(device)), labels[idx].to(device))
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return model.eval(), losses


@torch.no_grad()
def accuracy(model, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    correct = 0
    for i in range(0, len(images), batch_size):
        correct += (model(images[i:i + batch_size]).argmax(1) == labels[i:i + batch_size]).sum().item()
    return 100.0 * correct / len(images)
