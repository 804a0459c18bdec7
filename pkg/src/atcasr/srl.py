"""Speech representation learning from raw waveforms.

A strided convolutional encoder maps samples to latent frames ``z``; a
causal convolutional context network maps ``z[:t+1]`` to ``c[t]``; one
affine discriminator per prediction step scores future latents against
``c`` under a contrastive log-sigmoid objective.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Utterance, Waveform, chunk_for_srl, load_waveform
from .nn import (
    AdamState,
    LRSchedule,
    ParameterStore,
    adam_step,
    clip_grad_norm,
    grads_of,
    lr_at,
    save_checkpoint,
    zero_grads,
)
from .nn.layers import CausalConv1d, ChannelLayerNorm, conv_out_len

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class SRLConfig:
    enc_kernels: tuple[int, ...] = (10, 8, 4, 4, 4)
    enc_strides: tuple[int, ...] = (5, 4, 2, 2, 2)
    enc_channels: int = 512
    ctx_kernels: tuple[int, ...] = (3,) * 9
    ctx_channels: int = 512
    steps: int = 12
    negatives: int = 10
    chunk_seconds: float = 10.0

    def __post_init__(self):
        self.enc_kernels = tuple(int(k) for k in self.enc_kernels)
        self.enc_strides = tuple(int(s) for s in self.enc_strides)
        self.ctx_kernels = tuple(int(k) for k in self.ctx_kernels)
        if len(self.enc_kernels) != len(self.enc_strides) or not self.enc_kernels:
            raise ValueError("encoder kernels and strides must be non-empty and equal length")
        if self.steps < 1 or self.negatives < 1 or min(self.enc_strides) < 1:
            raise ValueError("steps, negatives and strides must all be >= 1")

    @property
    def dim(self) -> int:
        return self.ctx_channels

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.enc_kernels, self.enc_strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    @property
    def hop(self) -> int:
        return int(np.prod(self.enc_strides))

    def output_length(self, n_samples: int) -> int:
        L = n_samples
        for k, s in zip(self.enc_kernels, self.enc_strides):
            L = conv_out_len(L, k, s)
        return L

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SRLConfig":
        return cls(**d)


def small_srl_config(**overrides) -> SRLConfig:
    """Desk-scale configuration used by tests and the synthetic experiments."""
    base = dict(enc_channels=16, ctx_kernels=(3, 3), ctx_channels=16, steps=3, negatives=10, chunk_seconds=2.0)
    base.update(overrides)
    return SRLConfig(**base)


class _ConvBlock(nn.Module):
    """conv -> ReLU inside a stack; the last block is conv -> layer norm instead."""

    def __init__(self, conv: nn.Conv1d, channels: int, last: bool = False):
        super().__init__()
        self.conv = conv
        self.norm = ChannelLayerNorm(channels) if last else None

    def forward(self, x):
        y = self.conv(x)
        return self.norm(y) if self.norm is not None else F.relu(y)


class SRLModel(nn.Module):
    def __init__(self, config: SRLConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        c = config
        enc, cin = [], 1
        n_enc = len(c.enc_kernels)
        for i, (k, s) in enumerate(zip(c.enc_kernels, c.enc_strides)):
            enc.append(_ConvBlock(nn.Conv1d(cin, c.enc_channels, k, stride=s), c.enc_channels, last=i == n_enc - 1))
            cin = c.enc_channels
        self.encoder = nn.Sequential(*enc)
        ctx = []
        for i, k in enumerate(c.ctx_kernels):
            ctx.append(_ConvBlock(CausalConv1d(cin, c.ctx_channels, k), c.ctx_channels, last=i == len(c.ctx_kernels) - 1))
            cin = c.ctx_channels
        self.context = nn.Sequential(*ctx)
        if not c.ctx_kernels and c.enc_channels != c.ctx_channels:
            raise ValueError("with no context layers, ctx_channels must equal enc_channels")
        self.discriminators = nn.ModuleList(nn.Linear(c.ctx_channels, c.enc_channels) for _ in range(c.steps))
        # He init keeps the time-varying part of the signal from decaying under the biases.
        for block in (*self.encoder, *self.context):
            nn.init.kaiming_normal_(block.conv.weight, nonlinearity="relu")
            nn.init.zeros_(block.conv.bias)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, samples) -> latents (B, T, D)."""
        if x.shape[-1] < self.config.receptive_field:
            raise ValueError(
                f"input of {x.shape[-1]} samples is shorter than the {self.config.receptive_field}-sample receptive field"
            )
        return self.encoder(x.unsqueeze(1)).transpose(1, 2)

    def contextualize(self, z: torch.Tensor) -> torch.Tensor:
        """(B, T, D) latents -> (B, T, D) causal context vectors."""
        if z.shape[1] < 1:
            raise ValueError("empty latent sequence")
        return self.context(z.transpose(1, 2)).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.encode(x)
        return z, self.contextualize(z)

    def features(self, waves: Sequence[Waveform]) -> tuple[torch.Tensor, list[int]]:
        """Context features for a batch of waveforms (zero-padded), with valid lengths."""
        x, lens = pad_waves(waves, self.dtype)
        _, c = self(x)
        return c, [self.config.output_length(n) for n in lens]

    def zero_discriminators(self) -> None:
        with torch.no_grad():
            for h in self.discriminators:
                h.weight.zero_()
                h.bias.zero_()


def pad_waves(waves: Sequence[Waveform], dtype=torch.float32) -> tuple[torch.Tensor, list[int]]:
    lens = [len(w) for w in waves]
    x = torch.zeros(len(waves), max(lens), dtype=dtype)
    for i, w in enumerate(waves):
        x[i, : lens[i]] = torch.from_numpy(w.samples)
    return x, lens


def encode_frames(wave: Waveform, model: SRLModel) -> np.ndarray:
    x = torch.as_tensor(wave.samples, dtype=model.dtype)[None]
    with torch.no_grad():
        return model.encode(x)[0].numpy()


def contextualize(z: np.ndarray | torch.Tensor, model: SRLModel) -> np.ndarray:
    z = torch.as_tensor(z, dtype=model.dtype)[None]
    with torch.no_grad():
        return model.contextualize(z)[0].numpy()


def sample_negatives(T: int, steps: int, negatives: int, rng: np.random.Generator) -> np.ndarray:
    """Indices ``(steps, T, negatives)``: uniform over ``range(T)`` excluding the positive ``i + s``.

    Entries for ``i >= T - s`` are placeholders and never read.
    """
    if T < 2:
        raise ValueError("need at least two latent frames to draw negatives")
    out = rng.integers(0, T - 1, size=(steps, T, negatives))
    pos = (np.arange(T)[None, :, None] + np.arange(1, steps + 1)[:, None, None])
    out += out >= pos
    return out


def contrastive_loss(
    z: torch.Tensor,
    c: torch.Tensor,
    discriminators: Sequence[Callable[[torch.Tensor], torch.Tensor]],
    rng: np.random.Generator,
    negatives: int,
    neg_idx: np.ndarray | None = None,
) -> torch.Tensor:
    """Contrastive loss of one sequence, ``z`` and ``c`` of shape (T, D).

    For each step s and anchor i < T - s the positive logit is
    ``z[i+s] . h_s(c[i])``; each of ``negatives`` negatives contributes
    ``log sigmoid(-z_neg . h_s(c[i]))`` and their mean is weighted by
    ``negatives``. The result is the negated sum over s and i.
    """
    T = z.shape[0]
    k = len(discriminators)
    if k >= T:
        raise ValueError(f"{k} prediction steps need more than {T} latent frames")
    if neg_idx is None:
        neg_idx = sample_negatives(T, k, negatives, rng)
    total = z.new_zeros(())
    for s in range(1, k + 1):
        pred = discriminators[s - 1](c[: T - s])                    # (T-s, D)
        pos_logit = (z[s:] * pred).sum(-1)                          # (T-s,)
        idx = torch.as_tensor(neg_idx[s - 1, : T - s], dtype=torch.long)
        neg_logit = torch.einsum("ind,id->in", z[idx], pred)        # (T-s, lambda)
        total = total + F.logsigmoid(pos_logit).sum() + negatives * F.logsigmoid(-neg_logit).mean(-1).sum()
    loss = -total
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite contrastive loss {loss.item()}")
    return loss


def batch_contrastive_loss(model: SRLModel, waves: Sequence[Waveform], rng: np.random.Generator) -> torch.Tensor:
    """Mean over the batch of per-sequence contrastive losses."""
    x, lens = pad_waves(waves, model.dtype)
    z, c = model(x)
    losses = []
    for b, n in enumerate(lens):
        T = model.config.output_length(n)
        losses.append(contrastive_loss(z[b, :T], c[b, :T], model.discriminators, rng, model.config.negatives))
    return torch.stack(losses).mean()


# -- training ---------------------------------------------------------------

@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def log(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows if key in r]

    def to_tsv(self, path: str | Path) -> None:
        keys: list[str] = []
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        lines = ["\t".join(keys)]
        for r in self.rows:
            lines.append("\t".join("" if r.get(k) is None else _fmt(r[k]) for k in keys))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def srl_metadata(model: SRLModel, **extra) -> dict[str, str]:
    meta = {"stage": "srl", "srl_config": json.dumps(model.config.to_dict())}
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def load_srl(path: str | Path, dtype=torch.float32) -> SRLModel:
    from .nn import load_checkpoint

    values, meta = load_checkpoint(path)
    if "srl_config" not in meta:
        raise ValueError(f"{path}: not an SRL-bearing checkpoint (no srl_config metadata)")
    model = SRLModel(SRLConfig.from_dict(json.loads(meta["srl_config"])), dtype=dtype)
    prefix = "srl." if any(n.startswith("srl.") for n in values) else ""
    values = {n[len(prefix):]: t for n, t in values.items() if n.startswith(prefix)}
    ParameterStore.of(model).load(values)
    return model


def train_srl(
    utterances: Sequence[Utterance],
    config: SRLConfig,
    schedule: LRSchedule | Callable[[int], LRSchedule] | None,
    epochs: int,
    out_path: str | Path,
    batch_size: int = 8,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    waves: Sequence[Waveform] | None = None,
    max_grad_norm: float = 10.0,
) -> tuple[SRLModel, TrainHistory]:
    """Self-supervised training on unlabeled audio; writes ``out_path`` every epoch.

    ``schedule`` may be a callable taking the total iteration count, for
    cosine schedules whose length depends on how the audio was chunked.

    On a non-finite loss the last good checkpoint is left in place and
    :class:`DivergenceError` is raised.
    """
    if not utterances and waves is None:
        raise ValueError("empty unlabeled manifest")
    torch.manual_seed(seed)
    model = SRLModel(config, dtype=dtype)
    params = ParameterStore.of(model)
    if waves is None:
        waves = [load_waveform(u.audio_path) for u in utterances]
    chunks = chunk_for_srl(list(waves), config.chunk_seconds)
    chunks = [ch for ch in chunks if len(ch) >= config.receptive_field and config.output_length(len(ch)) > config.steps]
    if not chunks:
        raise ValueError("no chunk is long enough for the configured encoder and prediction steps")
    iters_per_epoch = math.ceil(len(chunks) / batch_size)
    if schedule is None:
        from .nn import srl_schedule

        schedule = srl_schedule(total_iters=epochs * iters_per_epoch)
    elif callable(schedule):
        schedule = schedule(epochs * iters_per_epoch)
    meta = dict(seed=seed, schedule=json.dumps(schedule.to_dict()))
    save_checkpoint(out_path, params, srl_metadata(model, epoch=0, **meta))

    history = TrainHistory()
    state = AdamState()
    rng = np.random.default_rng([seed, 1])
    it = 0
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(chunks))
        epoch_losses = []
        for b in range(iters_per_epoch):
            batch = [chunks[i] for i in order[b * batch_size:(b + 1) * batch_size]]
            lr = lr_at(schedule, it, epoch - 1)
            zero_grads(params)
            try:
                loss = batch_contrastive_loss(model, batch, rng)
            except DivergenceError:
                log.error("SRL training diverged at epoch %d iteration %d", epoch, it)
                raise
            loss.backward()
            clip_grad_norm(params, max_grad_norm)
            adam_step(params, grads_of(params), state, lr)
            value = loss.item()
            epoch_losses.append(value)
            history.log(epoch=epoch, iteration=it, lr=lr, loss=value)
            it += 1
        log.info("srl epoch %d loss %.4f", epoch, float(np.mean(epoch_losses)))
        save_checkpoint(out_path, params, srl_metadata(model, epoch=epoch, **meta))
    zero_grads(params)
    return model, history
