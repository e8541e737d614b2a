"""Latent-trajectory analysis: radii, mixing step, solid-angle divergence and
attack-window selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch


@dataclass
class LatentTrajectory:
    """Per-timestep latents (or radii) along one diffusion direction.

    ``forward`` trajectories run t = 0..T, ``reverse`` ones T..0.
    """

    direction: str
    timesteps: list
    states: list

    def __post_init__(self):
        if self.direction not in ("forward", "reverse"):
            raise ValueError(f"direction must be 'forward' or 'reverse', got {self.direction!r}")
        if len(self.timesteps) != len(self.states):
            raise ValueError("timesteps and states differ in length")
        steps = np.diff(np.asarray(self.timesteps))
        ok = (steps > 0) if self.direction == "forward" else (steps < 0)
        if not ok.all():
            raise ValueError(f"timesteps not strictly monotone for a {self.direction} trajectory")

    def radii(self) -> np.ndarray:
        """Batch-mean latent radius per recorded timestep."""
        out = []
        for s in self.states:
            if torch.is_tensor(s) and s.ndim > 1:
                out.append(float(latent_radius(s).mean()))
            else:
                out.append(float(torch.as_tensor(s, dtype=torch.float64).mean()))
        return np.asarray(out)

    def as_dict(self) -> dict:
        return dict(zip(self.timesteps, self.states))


@dataclass
class AttackWindow:
    t_start: int
    t_end: int
    t_mixing: Optional[int] = None
    degenerate: bool = False

    @property
    def N(self) -> int:
        return self.t_start - self.t_end

    def __post_init__(self):
        if self.t_start < self.t_end or self.t_end < 1:
            raise ValueError(f"invalid window ({self.t_start}, {self.t_end})")


def latent_radius(x: torch.Tensor) -> torch.Tensor:
    """Euclidean norm of each flattened sample (leading axis is the batch)."""
    if x.ndim == 1:
        return x.norm()
    return x.reshape(x.shape[0], -1).norm(dim=1)


def estimate_mixing_step(
    radii: Sequence[float], timesteps: Optional[Sequence[int]] = None, delta_r: float = 4.0
) -> int:
    """Approximate the mixing step from radii along a reverse trajectory.

    Returns the first timestep ``t`` (walking from T down) whose shift
    ``|r_t - r_{t-1}|`` reaches ``delta_r``. When no shift is that large the
    step with the largest shift is returned instead.
    """
    r = np.asarray(radii, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least two radii")
    if timesteps is None:
        timesteps = list(range(r.size - 1, -1, -1))
    if len(timesteps) != r.size:
        raise ValueError("radii and timesteps differ in length")
    shifts = np.abs(np.diff(r))
    hits = np.flatnonzero(shifts >= delta_r)
    i = int(hits[0]) if hits.size else int(np.argmax(shifts))
    return int(timesteps[i])


def solid_angle(q1: torch.Tensor, q2: torch.Tensor) -> float:
    """Angle (radians) between two flattened latents."""
    a = torch.as_tensor(q1, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(q2, dtype=torch.float64).reshape(-1)
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ValueError("solid_angle undefined for a zero vector")
    cos = torch.dot(a / na, b / nb).clamp(-1.0, 1.0)
    return float(torch.arccos(cos))


def _batch_angle(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.ndim <= 1:
        return solid_angle(a, b)
    return float(np.mean([solid_angle(u, v) for u, v in zip(a, b)]))


def divergence_profile(
    forward: LatentTrajectory, reverse: LatentTrajectory
) -> list[tuple[int, float]]:
    """Solid angle between matched latents of two trajectories.

    Batched latents are compared per sample and averaged. Output is ordered
    from the largest timestep down.
    """
    fwd, rev = forward.as_dict(), reverse.as_dict()
    if set(fwd) != set(rev):
        raise ValueError("trajectories cover different timesteps")
    out = []
    for t in sorted(fwd, reverse=True):
        a, b = fwd[t], rev[t]
        if not (torch.is_tensor(a) and torch.is_tensor(b)):
            raise ValueError("divergence_profile needs full latents, not radii")
        out.append((int(t), _batch_angle(a, b)))
    return out


def select_window(
    profile: Sequence[tuple[int, float]],
    clean_profile: Sequence[tuple[int, float]],
    t_mixing: Optional[int] = None,
    rel_tol: float = 0.05,
) -> AttackWindow:
    """Attack window from an adversarial and a clean divergence profile.

    ``t_start`` is the largest timestep where the profiles differ by more than
    ``rel_tol`` times the joint range of both profiles. ``t_end`` is where the
    adversarial profile peaks at or below ``t_start`` (never below t = 1).
    If the profiles never separate, a zero-length window at ``t_mixing`` is
    returned with ``degenerate=True``.
    """
    adv, clean = dict(profile), dict(clean_profile)
    if set(adv) != set(clean):
        raise ValueError("profiles cover different timesteps")
    ts = sorted((t for t in adv if t >= 1), reverse=True)
    if not ts:
        raise ValueError("profiles contain no timestep >= 1")
    values = np.array([adv[t] for t in ts] + [clean[t] for t in ts])
    tol = rel_tol * float(values.max() - values.min())
    diverged = [t for t in ts if abs(adv[t] - clean[t]) > tol]
    if not diverged:
        centre = t_mixing if t_mixing is not None else max(ts, key=lambda t: adv[t])
        return AttackWindow(centre, centre, t_mixing, degenerate=True)
    t_start = diverged[0]
    below = [t for t in ts if t <= t_start]
    # ties resolve to the largest t
    t_end = max(below, key=lambda t: (adv[t], t))
    return AttackWindow(t_start, t_end, t_mixing)


def forward_trajectory(
    x0: torch.Tensor, schedule, generator, record: str = "latents"
) -> LatentTrajectory:
    """Markov forward chain x_0 -> x_T with fresh noise at every step."""
    from .diffusion import randn_like

    x = x0
    keep = (lambda v: v.detach().clone()) if record == "latents" else latent_radius
    states = [keep(x)]
    for t in range(1, schedule.T + 1):
        b = float(schedule.beta[t])
        x = math.sqrt(1.0 - b) * x + math.sqrt(b) * randn_like(x, generator)
        states.append(keep(x))
    return LatentTrajectory("forward", list(range(schedule.T + 1)), states)
