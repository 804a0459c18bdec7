"""CTC loss via the log-space forward recursion, path collapse and greedy decoding."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

# Finite stand-in for log(0): keeps logsumexp gradients free of NaNs.
NEG = -1e30


class ImpossibleAlignmentError(ValueError):
    """No length-T path collapses to the label."""


def min_frames(label: Sequence[int]) -> int:
    """Shortest input that can emit ``label``: one frame per token plus a blank between repeats."""
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def ctc_loss_batch(
    logprobs: torch.Tensor,
    labels: Sequence[Sequence[int]],
    input_lengths: Sequence[int] | None = None,
    blank: int = 0,
) -> torch.Tensor:
    """Per-sequence ``-log p(label | input)`` for (B, T, V) log-probabilities.

    Impossible alignments yield ``+inf``.
    """
    B, T, V = logprobs.shape
    if input_lengths is None:
        input_lengths = [T] * B
    if len(labels) != B or len(input_lengths) != B:
        raise ValueError("labels and input_lengths must have one entry per sequence")
    S = 2 * max((len(l) for l in labels), default=0) + 1
    ext = torch.full((B, S), blank, dtype=torch.long)
    allow_skip = torch.zeros(B, S, dtype=torch.bool)
    for b, lab in enumerate(labels):
        if not lab:
            raise ValueError("empty label")
        if any(t == blank for t in lab):
            raise ValueError("label contains the blank index")
        ext[b, 1:2 * len(lab):2] = torch.as_tensor(list(lab), dtype=torch.long)
        for j in range(1, len(lab)):
            allow_skip[b, 2 * j + 1] = lab[j] != lab[j - 1]

    dtype = logprobs.dtype
    neg = torch.tensor(NEG, dtype=dtype)
    emit = torch.gather(logprobs, 2, ext[:, None, :].expand(B, T, S))            # (B, T, S)
    alpha = torch.full((B, S), NEG, dtype=dtype)
    alpha = torch.cat([emit[:, 0, :2], alpha[:, 2:]], dim=1) if S > 1 else emit[:, 0, :1]
    lens = torch.as_tensor(list(input_lengths))
    for t in range(1, T):
        a1 = torch.cat([neg.expand(B, 1), alpha[:, :-1]], dim=1)
        a2 = torch.cat([neg.expand(B, 2), alpha[:, :-2]], dim=1)
        a2 = torch.where(allow_skip, a2, neg)
        new = torch.logsumexp(torch.stack([alpha, a1, a2]), dim=0) + emit[:, t]
        alpha = torch.where((t < lens)[:, None], new, alpha)

    ends = torch.as_tensor([2 * len(l) for l in labels])
    last = alpha.gather(1, ends[:, None]).squeeze(1)
    prev = alpha.gather(1, (ends - 1)[:, None]).squeeze(1)
    logp = torch.logaddexp(last, prev)
    impossible = torch.as_tensor([min_frames(l) > n for l, n in zip(labels, input_lengths)])
    return torch.where(impossible, torch.tensor(float("inf"), dtype=dtype), -logp)


def ctc_loss(logprobs: torch.Tensor, label: Sequence[int], blank: int = 0, strict: bool = False) -> torch.Tensor:
    """``-log p(label | input)`` for one (T, V) log-probability matrix.

    Returns ``+inf`` when no path of length T collapses to ``label``; with
    ``strict=True`` that case raises :class:`ImpossibleAlignmentError`.
    """
    if strict and min_frames(label) > logprobs.shape[0]:
        raise ImpossibleAlignmentError(
            f"label of {len(label)} tokens needs {min_frames(label)} frames, have {logprobs.shape[0]}"
        )
    return ctc_loss_batch(logprobs[None], [list(label)], blank=blank)[0]


def collapse(path, blank=None):
    """Merge adjacent repeats, then drop blanks.

    Strings use ``'_'`` as the default blank and return a string; integer
    sequences default to blank 0 and return a list.
    """
    if isinstance(path, str):
        blank = "_" if blank is None else blank
        return "".join(s for i, s in enumerate(path) if s != blank and (i == 0 or path[i - 1] != s))
    blank = 0 if blank is None else blank
    path = list(path)
    return [s for i, s in enumerate(path) if s != blank and (i == 0 or path[i - 1] != s)]


def greedy_path(logprobs) -> list[int]:
    lp = logprobs.detach().cpu().numpy() if isinstance(logprobs, torch.Tensor) else np.asarray(logprobs)
    return np.argmax(lp, axis=-1).tolist()  # first maximum wins ties


def greedy_decode(logprobs, vocab) -> str:
    from ..vocab import decode_tokens

    return decode_tokens(collapse(greedy_path(logprobs), blank=vocab.blank), vocab)
