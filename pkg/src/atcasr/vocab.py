"""Grapheme vocabulary: blank, specials, then Chinese characters and English letters."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

BLANK = "<BLANK>"
SPACE = "<SPACE>"
UNK = "<UNK>"
APOSTROPHE = "'"
SPECIALS = (BLANK, SPACE, UNK, APOSTROPHE)
UNK_MARKER = "\ufffd"


class InvalidTokenError(ValueError):
    pass


def normalize_grapheme(ch: str) -> str:
    return ch.upper()


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if self.symbols[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    blank = 0

    @property
    def space(self) -> int:
        return 1

    @property
    def unk(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self._index.get(symbol, self.unk)

    def render(self, idx: int) -> str:
        """Surface text of one (non-blank) token."""
        if idx == self.blank:
            raise InvalidTokenError("the blank token has no surface form")
        s = self.symbols[idx]
        if s == SPACE:
            return " "
        if s == UNK:
            return UNK_MARKER
        return s

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))

    def digest(self) -> str:
        return hashlib.sha256("".join(s + "\n" for s in self.symbols).encode("utf-8")).hexdigest()


def build_vocab(transcripts: Iterable[str]) -> Vocabulary:
    seen = set()
    for text in transcripts:
        for ch in text:
            if ch.isspace() or ch == APOSTROPHE:
                continue
            seen.add(normalize_grapheme(ch))
    seen -= set(SPECIALS)
    return Vocabulary(SPECIALS + tuple(sorted(seen)))


def encode_text(text: str, vocab: Vocabulary) -> list[int]:
    out = []
    for ch in text:
        if ch == " ":
            out.append(vocab.space)
        elif ch.isspace():
            continue
        else:
            out.append(vocab.index(normalize_grapheme(ch)))
    return out


def decode_tokens(tokens: Sequence[int], vocab: Vocabulary) -> str:
    for t in tokens:
        if t == vocab.blank:
            raise InvalidTokenError("blank index in a token sequence")
        if not 0 < t < len(vocab):
            raise InvalidTokenError(f"token index {t} out of range")
    return "".join(vocab.render(t) for t in tokens)
