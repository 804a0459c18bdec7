"""Learning-rate schedules: cosine decay with warmup, and epoch step-halving."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal


@dataclass(frozen=True)
class LRSchedule:
    kind: Literal["cosine", "step"] = "cosine"
    peak_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_iters: int = 0
    warmup_start_lr: float = 0.0
    total_iters: int = 0
    halve_every_epochs: int = 25

    def __post_init__(self):
        if self.kind not in ("cosine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cosine" and self.total_iters < self.warmup_iters:
            raise ValueError("total_iters must be >= warmup_iters")
        if self.kind == "step" and self.halve_every_epochs < 1:
            raise ValueError("halve_every_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def srl_schedule(total_iters: int) -> LRSchedule:
    """Representation-learning schedule: 500-iteration warmup from 1e-7 to 1e-3, cosine down to 1e-9."""
    return LRSchedule(
        kind="cosine",
        peak_lr=1e-3,
        min_lr=1e-9,
        warmup_iters=500,
        warmup_start_lr=1e-7,
        total_iters=max(total_iters, 500),
    )


def halving_schedule(lr: float = 1e-4, every: int = 25, warmup_iters: int = 0, warmup_start_lr: float = 0.0) -> LRSchedule:
    return LRSchedule(
        kind="step",
        peak_lr=lr,
        halve_every_epochs=every,
        warmup_iters=warmup_iters,
        warmup_start_lr=warmup_start_lr,
    )


def lr_at(schedule: LRSchedule, iteration: int, epoch: int = 0) -> float:
    """Learning rate for a global ``iteration`` (0-based) inside ``epoch`` (0-based).

    A cosine schedule over ``total_iters`` iterations lands on ``min_lr`` at
    its final iteration, ``total_iters - 1``.
    """
    if iteration < 0 or epoch < 0:
        raise ValueError("iteration and epoch must be non-negative")
    s = schedule
    if iteration < s.warmup_iters:
        frac = iteration / s.warmup_iters
        return s.warmup_start_lr + (s.peak_lr - s.warmup_start_lr) * frac

    if s.kind == "step":
        return max(s.peak_lr * 2.0 ** (-(epoch // s.halve_every_epochs)), s.min_lr)

    if iteration == s.warmup_iters:
        return s.peak_lr
    last = s.total_iters - 1
    if iteration >= last:
        return s.min_lr
    progress = (iteration - s.warmup_iters) / (last - s.warmup_iters)
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))
