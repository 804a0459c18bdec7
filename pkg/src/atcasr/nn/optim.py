"""Adam optimizer over a :class:`ParameterStore`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from .params import ParameterStore


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: ParameterStore,
    grads: Mapping[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    lr_scale: Mapping[str, float] | None = None,
) -> AdamState:
    """Apply one bias-corrected Adam update in place and return ``state``.

    Parameters whose gradient is missing or identically zero are left alone,
    moments included; this keeps frozen sub-networks bit-stable.
    ``lr_scale`` optionally multiplies the rate of individual parameters.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g is not None and tuple(g.shape) != tuple(params[name].shape):
            raise ValueError(
                f"gradient shape {tuple(g.shape)} does not match parameter {name!r} {tuple(params[name].shape)}"
            )

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None or not torch.any(g):
                continue
            g = g.to(p.dtype)
            m = state.exp_avg.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            v = state.exp_avg_sq[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            rate = lr * lr_scale.get(name, 1.0) if lr_scale else lr
            p.addcdiv_(m / bc1, denom, value=-rate)
    return state


def grads_of(params: ParameterStore) -> dict[str, torch.Tensor | None]:
    return {n: p.grad for n, p in params.items()}


def zero_grads(params: ParameterStore) -> None:
    for p in params.values():
        p.grad = None


def clip_grad_norm(params: ParameterStore, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    gs = [p.grad for p in params.values() if p.grad is not None]
    if not gs:
        return 0.0
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in gs))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for g in gs:
            g.mul_(scale)
    return total
