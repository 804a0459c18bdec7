"""Named parameter storage shared by every network in the package."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping

import torch
from torch import nn


class ParameterStore(Mapping[str, torch.Tensor]):
    """Ordered, name-unique collection of trainable tensors.

    Tensors are held by reference, so a store built from a module sees (and
    mutates) the module's live weights. Shapes are fixed at insertion.
    """

    def __init__(self, entries: Mapping[str, torch.Tensor] | None = None):
        self._entries: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, tensor in (entries or {}).items():
            self.add(name, tensor)

    @classmethod
    def of(cls, module: nn.Module, prefix: str = "") -> "ParameterStore":
        store = cls()
        for name, p in module.named_parameters():
            store.add(prefix + name, p)
        return store

    def add(self, name: str, tensor: torch.Tensor) -> None:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor

    def assign(self, name: str, value: torch.Tensor) -> None:
        """Copy ``value`` into the existing tensor ``name`` (shape must match)."""
        target = self._entries[name]
        if tuple(value.shape) != tuple(target.shape):
            raise ValueError(
                f"shape mismatch for {name!r}: have {tuple(target.shape)}, got {tuple(value.shape)}"
            )
        with torch.no_grad():
            target.copy_(value.to(dtype=target.dtype))

    def load(self, values: Mapping[str, torch.Tensor], strict: bool = True) -> None:
        missing = [n for n in self._entries if n not in values]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name in self._entries:
            if name in values:
                self.assign(name, values[name])

    def subset(self, prefix: str) -> "ParameterStore":
        return ParameterStore({n: t for n, t in self._entries.items() if n.startswith(prefix)})

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: t.detach().clone() for n, t in self._entries.items()}

    def numel(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ParameterStore({len(self)} tensors, {self.numel()} scalars)"
