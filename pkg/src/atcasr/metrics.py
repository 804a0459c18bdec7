"""Label error rate over Chinese characters and English words, and script-based language labels."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

_CJK = r"\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff"
_TOKEN = re.compile(rf"[{_CJK}]|[A-Za-z0-9']+")
_CJK_RE = re.compile(rf"[{_CJK}]")
_LATIN_RE = re.compile(r"[A-Za-z]")


def is_cjk(ch: str) -> bool:
    return bool(_CJK_RE.fullmatch(ch))


def tokenize_for_ler(text: str) -> list[str]:
    """One token per CJK character; runs of Latin letters, digits and apostrophes form words."""
    return _TOKEN.findall(text)


@dataclass(frozen=True)
class EditOps:
    insertions: int = 0
    deletions: int = 0
    substitutions: int = 0

    @property
    def total(self) -> int:
        return self.insertions + self.deletions + self.substitutions

    def __iter__(self):
        return iter((self.insertions, self.deletions, self.substitutions))


def edit_distance_ops(ref: Sequence, hyp: Sequence) -> EditOps:
    """Minimal (I, D, S) turning ``hyp`` into ``ref``; among minimal solutions, most substitutions."""
    n, m = len(ref), len(hyp)
    # cell = (total, insertions + deletions, I, D, S)
    prev = [(j, j, j, 0, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0, i, 0)]
        for j in range(1, m + 1):
            t, g, I, D, S = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = (t, g, I, D, S)
            else:
                best = (t + 1, g, I, D, S + 1)
            t, g, I, D, S = prev[j]
            best = min(best, (t + 1, g + 1, I, D + 1, S))
            t, g, I, D, S = cur[j - 1]
            best = min(best, (t + 1, g + 1, I + 1, D, S))
            cur.append(best)
        prev = cur
    _, _, I, D, S = prev[m]
    return EditOps(I, D, S)


@dataclass
class LERResult:
    errors: int
    ref_tokens: int
    excluded: int

    @property
    def ler(self) -> float:
        return self.errors / self.ref_tokens if self.ref_tokens else 0.0


def ler_counts(pairs: Iterable[tuple[str, str]]) -> LERResult:
    errors = tokens = excluded = 0
    for ref, hyp in pairs:
        r = tokenize_for_ler(ref)
        if not r:
            excluded += 1
            continue
        errors += edit_distance_ops(r, tokenize_for_ler(hyp)).total
        tokens += len(r)
    return LERResult(errors, tokens, excluded)


def ler(pairs: Iterable[tuple[str, str]]) -> float:
    """Corpus LER: total edit operations over total reference tokens; empty references are skipped."""
    return ler_counts(pairs).ler


def classify_language(text: str, threshold: float = 0.9) -> str:
    """``zh``/``en`` when at least ``threshold`` of the lettered tokens are in that script, else ``mixed``."""
    zh = en = 0
    for tok in tokenize_for_ler(text):
        if is_cjk(tok):
            zh += 1
        elif _LATIN_RE.search(tok):
            en += 1
    total = zh + en
    if total == 0:
        return "mixed"
    if zh >= threshold * total:
        return "zh"
    if en >= threshold * total:
        return "en"
    return "mixed"
