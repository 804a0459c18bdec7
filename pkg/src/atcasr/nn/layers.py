"""Layer primitives on top of torch; gradients come from autograd.

Sequence tensors are laid out ``(batch, channels, time)`` for the
convolutional layers and ``(batch, time, features)`` elsewhere.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

# Re-exported so callers have one place to import every primitive from.
Conv1d = nn.Conv1d
ConvTranspose1d = nn.ConvTranspose1d
Linear = nn.Linear
LSTM = nn.LSTM
ReLU = nn.ReLU


def conv_out_len(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


class CausalConv1d(nn.Conv1d):
    """Stride-1 convolution left-padded by ``kernel - 1`` so output t sees inputs <= t."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, **kw):
        super().__init__(in_channels, out_channels, kernel_size, stride=1, padding=0, **kw)
        self.left_pad = kernel_size - 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(F.pad(x, (self.left_pad, 0)))


class ChannelLayerNorm(nn.LayerNorm):
    """Layer norm over the channel axis of a ``(batch, channels, time)`` tensor."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    return F.log_softmax(x, dim=-1)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)
