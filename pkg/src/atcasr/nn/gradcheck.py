"""Finite-difference verification of autograd gradients."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from .params import ParameterStore


class GradCheckError(RuntimeError):
    pass


def grad_check(
    loss_fn: Callable[[ParameterStore], torch.Tensor],
    params: ParameterStore,
    probe_count: int = 20,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``probe_count`` scalar entries are drawn uniformly over all parameters.
    The relative error of a probe is ``|a - n| / max(|a|, |n|, floor)``.
    ``loss_fn`` must be deterministic (re-seed any sampling inside it).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    if sizes.sum() == 0:
        return 0.0

    frozen = [p for p in params.values() if not p.requires_grad]
    for p in frozen:
        p.requires_grad_(True)
    try:
        return _check(loss_fn, params, names, sizes, probe_count, h, seed, floor)
    finally:
        for p in params.values():
            p.grad = None
        for p in frozen:
            p.requires_grad_(False)


def _check(loss_fn, params, names, sizes, probe_count, h, seed, floor) -> float:
    for p in params.values():
        p.grad = None
    loss = loss_fn(params)
    if not torch.isfinite(loss):
        raise GradCheckError(f"non-finite loss {loss.item()} at the base point")
    loss.backward()
    analytic = {n: (params[n].grad.detach().clone() if params[n].grad is not None else torch.zeros_like(params[n]))
                for n in names}

    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(int(sizes.sum()), size=min(probe_count, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for fid in flat_ids:
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            name, j = names[k], int(fid - offsets[k])
            flat = params[name].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            up = float(loss_fn(params))
            flat[j] = orig - h
            down = float(loss_fn(params))
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError(f"non-finite loss while probing {name}[{j}]")
            numeric = (up - down) / (2 * h)
            a = float(analytic[name].view(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
    return worst
