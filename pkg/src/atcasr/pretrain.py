"""Masked-frame reconstruction pretraining of the recognition backbone."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .asr.model import Backbone, BackboneConfig, ReconstructionHead
from .corpus import FeatureSequence, Utterance, make_batches, pad_even
from .nn import (
    AdamState,
    LRSchedule,
    ParameterStore,
    adam_step,
    clip_grad_norm,
    grads_of,
    halving_schedule,
    lr_at,
    save_checkpoint,
    zero_grads,
)
from .srl import DivergenceError, TrainHistory

log = logging.getLogger(__name__)

MASK_PROB = 0.15
SMOOTH_NEIGHBORS = 5
ZERO, NOISE, SMOOTH, KEEP = 0, 1, 2, -1
ACTION_NAMES = {ZERO: "zero", NOISE: "noise", SMOOTH: "smooth"}


@dataclass
class MaskSpec:
    """``mask[t] == 1`` marks a selected frame; ``action[t]`` is ZERO/NOISE/SMOOTH there and KEEP elsewhere."""

    mask: np.ndarray
    action: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int8)
        self.action = np.asarray(self.action, dtype=np.int8)
        if self.mask.shape != self.action.shape:
            raise ValueError("mask and action must have the same length")
        if np.any((self.mask == 1) != (self.action != KEEP)):
            raise ValueError("actions must be defined exactly on selected frames")

    def __len__(self) -> int:
        return self.mask.size

    @classmethod
    def none(cls, T: int) -> "MaskSpec":
        return cls(np.zeros(T, np.int8), np.full(T, KEEP, np.int8))


def select_mask(T: int, rng: np.random.Generator, prob: float = MASK_PROB) -> MaskSpec:
    """Select each frame with probability ``prob``; pick its corruption from p ~ U(0, 1).

    p in [0, 0.1) zeroes the frame, [0.1, 0.2) replaces it with noise,
    otherwise it is smoothed from its neighbours.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    selected = rng.random(T) < prob
    p = rng.random(T)
    action = np.where(p < 0.1, ZERO, np.where(p < 0.2, NOISE, SMOOTH))
    return MaskSpec(selected.astype(np.int8), np.where(selected, action, KEEP))


def neighbor_mean(frames: np.ndarray, t: int, n: int = SMOOTH_NEIGHBORS) -> np.ndarray:
    """Mean of up to ``n`` frames on each side of ``t`` (``t`` itself excluded), truncated at the edges."""
    T = frames.shape[0]
    idx = [i for i in range(max(0, t - n), min(T, t + n + 1)) if i != t]
    if not idx:
        return frames[t].copy()
    return frames[idx].mean(axis=0)


def apply_mask(F: np.ndarray | FeatureSequence, spec: MaskSpec, rng: np.random.Generator,
               n: int = SMOOTH_NEIGHBORS) -> np.ndarray:
    """Corrupted copy of ``F``; smoothing reads the original (uncorrupted) neighbours."""
    frames = F.frames if isinstance(F, FeatureSequence) else np.asarray(F)
    if len(spec) != frames.shape[0]:
        raise ValueError(f"mask length {len(spec)} != frame count {frames.shape[0]}")
    out = frames.copy()
    for t in np.flatnonzero(spec.mask):
        a = spec.action[t]
        if a == ZERO:
            out[t] = 0.0
        elif a == NOISE:
            out[t] = rng.standard_normal(frames.shape[1])
        else:
            out[t] = neighbor_mean(frames, t, n)
    return out


def reconstruct(F_tilde: torch.Tensor, backbone: Backbone, head: ReconstructionHead,
                lengths: list[int] | None = None) -> torch.Tensor:
    """(B, T, D) corrupted features with even T -> (B, T, D) reconstruction."""
    out = head(backbone(F_tilde, lengths))
    if out.shape != F_tilde.shape:
        raise ValueError(f"reconstruction shape {tuple(out.shape)} != input shape {tuple(F_tilde.shape)}")
    return out


def reconstruct_sequence(frames: np.ndarray, backbone: Backbone, head: ReconstructionHead) -> np.ndarray:
    """Single (T, D) sequence; odd T is padded by repeating the last frame and trimmed afterwards."""
    T = frames.shape[0]
    x = torch.as_tensor(pad_even(frames), dtype=next(backbone.parameters()).dtype)[None]
    with torch.no_grad():
        return reconstruct(x, backbone, head)[0, :T].numpy()


def masked_l1_loss(F: torch.Tensor, F_hat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the mean absolute error on masked frames.

    ``F``/``F_hat`` are (B, T, D) or (T, D); ``mask`` is (B, T) or (T,).
    Samples without masked frames contribute zero.
    """
    if F.shape != F_hat.shape:
        raise ValueError(f"shape mismatch {tuple(F.shape)} vs {tuple(F_hat.shape)}")
    if F.dim() == 2:
        F, F_hat, mask = F[None], F_hat[None], mask[None]
    m = mask.to(F.dtype)
    if m.shape != F.shape[:2]:
        raise ValueError("mask must match the frame axis")
    per = ((F - F_hat).abs() * m[..., None]).sum(dim=(1, 2))
    denom = m.sum(dim=1) * F.shape[2]
    per = torch.where(denom > 0, per / denom.clamp(min=1), torch.zeros_like(per))
    return per.mean()


def pad_batch(seqs: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, list[int]]:
    lens = [s.shape[0] for s in seqs]
    T = max(lens)
    T += T % 2
    x = torch.zeros(len(seqs), T, seqs[0].shape[1], dtype=dtype)
    for i, s in enumerate(seqs):
        x[i, : lens[i]] = torch.as_tensor(s, dtype=dtype)
    return x, lens


def pretrain_metadata(backbone: Backbone, in_dim: int, **extra) -> dict[str, str]:
    meta = {
        "stage": "pretrain",
        "backbone_config": json.dumps(backbone.config.to_dict()),
        "in_dim": str(in_dim),
    }
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def pretrain_backbone(
    utterances: Sequence[Utterance],
    features: dict[str, np.ndarray],
    backbone: Backbone,
    head: ReconstructionHead,
    epochs: int,
    out_path: str | Path,
    schedule: LRSchedule | None = None,
    batch_size: int = 64,
    seed: int = 0,
    max_grad_norm: float = 10.0,
    history: TrainHistory | None = None,
) -> TrainHistory:
    """Train ``backbone`` + ``head`` to reconstruct masked frames of fixed ``features``.

    ``features`` maps utterance id to its (T, D) frames from a frozen
    front-end. Odd-length sequences are padded by repeating their last
    frame. Only the backbone is written to ``out_path`` (every epoch).
    """
    if not utterances:
        raise ValueError("empty unlabeled manifest")
    schedule = schedule or halving_schedule(1e-4, 25)
    in_dim = backbone.in_dim
    bparams = ParameterStore.of(backbone)
    params = ParameterStore.of(backbone, "backbone.")
    for n, p in head.named_parameters():
        params.add("head." + n, p)
    dtype = next(backbone.parameters()).dtype
    meta = dict(seed=seed, schedule=json.dumps(schedule.to_dict()))
    save_checkpoint(out_path, bparams, pretrain_metadata(backbone, in_dim, epoch=0, **meta))

    history = history or TrainHistory()
    state = AdamState()
    rng = np.random.default_rng([seed, 2])
    it = 0
    for epoch in range(1, epochs + 1):
        losses = []
        for batch in make_batches(utterances, epoch, batch_size, seed):
            seqs = [pad_even(features[u.id]) for u in batch]
            specs = [select_mask(s.shape[0], rng) for s in seqs]
            corrupted = [apply_mask(s, sp, rng) for s, sp in zip(seqs, specs)]
            target, lens = pad_batch(seqs, dtype)
            x, _ = pad_batch(corrupted, dtype)
            mask = torch.zeros(target.shape[:2], dtype=dtype)
            for i, sp in enumerate(specs):
                mask[i, : len(sp)] = torch.as_tensor(sp.mask, dtype=dtype)
            lr = lr_at(schedule, it, epoch - 1)
            zero_grads(params)
            loss = masked_l1_loss(target, reconstruct(x, backbone, head, lens), mask)
            if not torch.isfinite(loss):
                log.error("pretraining diverged at epoch %d iteration %d", epoch, it)
                raise DivergenceError(f"non-finite masked L1 loss {loss.item()}")
            loss.backward()
            clip_grad_norm(params, max_grad_norm)
            adam_step(params, grads_of(params), state, lr)
            losses.append(loss.item())
            it += 1
        mean = float(np.mean(losses))
        history.log(epoch=epoch, lr=lr, loss=mean)
        log.info("pretrain epoch %d masked-L1 %.4f", epoch, mean)
        save_checkpoint(out_path, bparams, pretrain_metadata(backbone, in_dim, epoch=epoch, **meta))
    zero_grads(params)
    return history


def load_backbone(path: str | Path, dtype=torch.float32) -> Backbone:
    from .nn import load_checkpoint

    values, meta = load_checkpoint(path)
    cfg = BackboneConfig.from_dict(json.loads(meta["backbone_config"]))
    backbone = Backbone(int(meta["in_dim"]), cfg, dtype=dtype)
    prefix = "backbone." if any(n.startswith("backbone.") for n in values) else ""
    ParameterStore.of(backbone).load({n[len(prefix):]: t for n, t in values.items() if n.startswith(prefix)})
    return backbone
