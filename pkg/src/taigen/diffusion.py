"""DDPM noise schedule, forward diffusion and ancestral reverse sampling.

All schedule arrays are stored with length ``T + 1`` so they can be indexed
with 1-based timesteps directly. Index 0 is the boundary ``t = 0``:
``beta[0] = 0``, ``alpha[0] = 1``, ``alpha_bar[0] = 1``, ``sigma[0] = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch

from .trajectory import LatentTrajectory, latent_radius


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor
    eta: float = 1.0

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta[1:].tolist(), "eta": self.eta}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return schedule_from_betas(d["beta"], eta=d.get("eta", 1.0))


def schedule_from_betas(betas: Sequence[float], eta: float = 1.0) -> NoiseSchedule:
    b = torch.as_tensor(list(betas), dtype=torch.float64)
    if b.ndim != 1 or b.numel() < 1:
        raise ValueError("need at least one beta")
    if not bool(((b > 0) & (b < 1)).all()):
        raise ValueError("betas must lie in (0, 1)")
    T = b.numel()
    beta = torch.cat([torch.zeros(1, dtype=torch.float64), b])
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    sigma = torch.zeros(T + 1, dtype=torch.float64)
    # posterior std; alpha_bar[0] = 1 makes sigma[1] exactly 0
    sigma[1:] = eta * torch.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma, eta=float(eta))


def make_linear_schedule(
    T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02, eta: float = 1.0
) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(torch.linspace(beta_start, beta_end, T, dtype=torch.float64).tolist(), eta)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(x0: torch.Tensor, t: int, noise: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Sample q(x_t | x_0) with explicit noise."""
    t = s.check_t(t)
    _same_shape(x0, noise, "forward_diffuse")
    ab = float(s.alpha_bar[t])
    return ab ** 0.5 * x0 + (1.0 - ab) ** 0.5 * noise


def reverse_step(
    x_t: torch.Tensor, t: int, eps: torch.Tensor, z: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    t = s.check_t(t)
    _same_shape(x_t, eps, "reverse_step")
    _same_shape(x_t, z, "reverse_step")
    a = float(s.alpha[t])
    ab = float(s.alpha_bar[t])
    mean = (x_t - (1.0 - a) / (1.0 - ab) ** 0.5 * eps) / a ** 0.5
    return mean + float(s.sigma[t]) * z


def predict_x0(x_t: torch.Tensor, t: int, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    t = s.check_t(t)
    _same_shape(x_t, eps, "predict_x0")
    ab = float(s.alpha_bar[t])
    return (x_t - (1.0 - ab) ** 0.5 * eps) / ab ** 0.5


def timestep_batch(t: int, x: torch.Tensor) -> torch.Tensor:
    return torch.full((x.shape[0],), int(t), dtype=torch.long, device=x.device)


GeneratorArg = Union[torch.Generator, Sequence[torch.Generator]]


def randn_like(x: torch.Tensor, generator: GeneratorArg) -> torch.Tensor:
    """Gaussian noise shaped like ``x``.

    A list of generators draws one sample per batch element from its own
    stream, so a sample's noise does not depend on the rest of the batch.
    """
    if isinstance(generator, torch.Generator):
        return torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
    if len(generator) != x.shape[0]:
        raise ValueError("need one generator per batch element")
    return torch.stack(
        [torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in generator]
    ).to(x.device)


@torch.no_grad()
def sample(
    model: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    s: NoiseSchedule,
    x_T: torch.Tensor,
    generator: Optional[GeneratorArg] = None,
    seed: Optional[int] = None,
    record: Optional[str] = "latents",
    t_from: Optional[int] = None,
) -> tuple[torch.Tensor, Optional[LatentTrajectory]]:
    """Run the reverse chain from ``x_T`` down to ``t = 0``.

    ``model(x, t)`` must return the noise prediction (a tensor, or any object
    with an ``epsilon`` attribute). ``record`` selects what the returned
    trajectory keeps per step: ``"latents"``, ``"radii"`` or ``None``.
    Intermediate latents are never clamped; the final image is.
    """
    if generator is None:
        if seed is None:
            raise ValueError("sample needs a generator or a seed")
        generator = torch.Generator().manual_seed(seed)
    if record not in ("latents", "radii", None):
        raise ValueError(f"unknown record mode {record!r}")
    t_from = s.T if t_from is None else s.check_t(t_from)
    x = x_T
    states = [_record(x, record)]
    for t in range(t_from, 0, -1):
        eps = model(x, timestep_batch(t, x))
        eps = getattr(eps, "epsilon", eps)
        z = randn_like(x, generator)
        x = reverse_step(x, t, eps, z, s)
        states.append(_record(x, record))
    traj = None
    if record is not None:
        traj = LatentTrajectory("reverse", list(range(t_from, -1, -1)), states)
    return x.clamp(-1.0, 1.0), traj


def _record(x: torch.Tensor, mode: Optional[str]):
    if mode == "latents":
        return x.detach().clone()
    if mode == "radii":
        return latent_radius(x)
    return None
