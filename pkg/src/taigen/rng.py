"""Named, per-image random streams derived from one master seed."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

STREAM_IDS = {"forward": 0, "sampling": 1, "target": 2}


def stream_seed(master_seed: int, index: int, name: str) -> int:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), STREAM_IDS[name]))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def generators(master_seed: int, indices: Sequence[int], name: str) -> list[torch.Generator]:
    return [torch.Generator().manual_seed(stream_seed(master_seed, i, name)) for i in indices]


@dataclass
class AttackStreams:
    """Forward-noise, sampling-noise and target-choice streams, one per image."""

    forward: list
    sampling: list
    target: list

    @classmethod
    def derive(cls, master_seed: int, indices: Sequence[int]) -> "AttackStreams":
        return cls(*(generators(master_seed, indices, n) for n in ("forward", "sampling", "target")))
