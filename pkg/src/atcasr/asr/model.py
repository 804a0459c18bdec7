"""Multi-scale CNN + LSTM backbone and the time-distributed grapheme predictor."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence


@dataclass
class BackboneConfig:
    branch_kernels: tuple[int, ...] = (3, 5, 7)
    branch_channels: int = 128
    stride_channels: int = 256
    lstm_layers: int = 2
    lstm_hidden: int = 256
    bidirectional: bool = True

    def __post_init__(self):
        self.branch_kernels = tuple(int(k) for k in self.branch_kernels)
        if any(k % 2 == 0 for k in self.branch_kernels):
            raise ValueError("branch kernels must be odd for length-preserving padding")

    @property
    def out_dim(self) -> int:
        return self.lstm_hidden * (2 if self.bidirectional else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def small_backbone_config(**overrides) -> BackboneConfig:
    base = dict(branch_channels=16, stride_channels=32, lstm_layers=1, lstm_hidden=32, bidirectional=True)
    base.update(overrides)
    return BackboneConfig(**base)


class Backbone(nn.Module):
    """Features (B, T, D) with even T -> hidden states (B, T/2, out_dim)."""

    def __init__(self, in_dim: int, config: BackboneConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.in_dim = in_dim
        self.config = config
        c = config
        self.branches = nn.ModuleList(
            nn.Conv1d(in_dim, c.branch_channels, k, padding=k // 2) for k in c.branch_kernels
        )
        width = c.branch_channels * len(c.branch_kernels)
        self.downsample = nn.Conv1d(width, c.stride_channels, 3, stride=2, padding=1)
        self.lstm = nn.LSTM(
            c.stride_channels, c.lstm_hidden, num_layers=c.lstm_layers,
            batch_first=True, bidirectional=c.bidirectional,
        )
        self.to(dtype)

    def multiscale(self, x: torch.Tensor) -> torch.Tensor:
        """(B, D, T) -> concatenated branch outputs (B, branches * channels, T)."""
        return torch.cat([F.relu(b(x)) for b in self.branches], dim=1)

    def forward(self, feats: torch.Tensor, lengths: list[int] | None = None) -> torch.Tensor:
        B, T, D = feats.shape
        if D != self.in_dim:
            raise ValueError(f"backbone expects {self.in_dim}-dim features, got {D}")
        if T % 2:
            raise ValueError(f"frame count {T} is odd; pad to an even length first")
        if lengths is None:
            lengths = [T] * B
        if any(n % 2 for n in lengths):
            raise ValueError("every sequence length must be even")
        mask = _time_mask(lengths, T, feats.dtype)                        # (B, T)
        x = feats.transpose(1, 2) * mask[:, None, :]
        h = self.multiscale(x) * mask[:, None, :]
        h = F.relu(self.downsample(h)).transpose(1, 2)                     # (B, T/2, C)
        out_lens = [n // 2 for n in lengths]
        if all(n == T // 2 for n in out_lens):
            y, _ = self.lstm(h)
            return y
        packed = pack_padded_sequence(h, torch.tensor(out_lens), batch_first=True, enforce_sorted=False)
        y, _ = self.lstm(packed)
        y, _ = pad_packed_sequence(y, batch_first=True, total_length=T // 2)
        return y


def _time_mask(lengths: list[int], T: int, dtype) -> torch.Tensor:
    return (torch.arange(T)[None, :] < torch.tensor(lengths)[:, None]).to(dtype)


class PredictionLayer(nn.Module):
    """Shared affine map applied at every frame, then log-softmax over the vocabulary."""

    def __init__(self, hidden_dim: int, vocab_size: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.vocab_size = vocab_size
        self.proj = nn.Linear(hidden_dim, vocab_size).to(dtype)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.proj.in_features:
            raise ValueError(f"prediction layer expects width {self.proj.in_features}, got {hidden.shape[-1]}")
        return F.log_softmax(self.proj(hidden), dim=-1)


def predict_logprobs(hidden: torch.Tensor, layer: PredictionLayer, vocab_size: int | None = None) -> torch.Tensor:
    if vocab_size is not None and layer.vocab_size != vocab_size:
        raise ValueError(f"prediction layer width {layer.vocab_size} != vocabulary size {vocab_size}")
    return layer(hidden)


class ReconstructionHead(nn.Module):
    """Transposed convolution undoing the backbone's stride-2 stage: (B, T/2, H) -> (B, T, D)."""

    def __init__(self, hidden_dim: int, out_dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.deconv = nn.ConvTranspose1d(hidden_dim, out_dim, kernel_size=2, stride=2).to(dtype)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.deconv.in_channels:
            raise ValueError(
                f"reconstruction head expects width {self.deconv.in_channels}, got {hidden.shape[-1]}"
            )
        return self.deconv(hidden.transpose(1, 2)).transpose(1, 2)
