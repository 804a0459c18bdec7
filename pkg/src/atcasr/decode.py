"""Character n-gram language model and LM-fused CTC prefix beam search."""

from __future__ import annotations

import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import tokenize_for_ler
from .vocab import Vocabulary, normalize_grapheme

BOS, EOS, UNK_TOKEN = "<s>", "</s>", "<unk>"
ARPA_SPACE = "<sp>"
LOG10 = math.log(10.0)


def _chars(text: str) -> list[str]:
    return [normalize_grapheme(ch) for ch in text]


@dataclass
class CharNGramLM:
    """Backoff character LM; ``prob`` and ``backoff`` hold natural-log values keyed by n-gram tuples.

    ``p(w | h) = prob[h + w]`` when that n-gram was observed, otherwise
    ``backoff[h] * p(w | h[1:])`` (a missing backoff weight counts as 1).
    """

    order: int
    prob: dict[tuple[str, ...], float] = field(default_factory=dict)
    backoff: dict[tuple[str, ...], float] = field(default_factory=dict)
    discount: float = 0.75

    @property
    def symbols(self) -> list[str]:
        """Every predictable symbol: observed characters, end of sentence and the unknown class."""
        return [k[0] for k in self.prob if len(k) == 1 and k[0] != BOS]

    def _map(self, ch: str) -> str:
        return ch if (ch,) in self.prob else UNK_TOKEN

    def cond_logprob(self, ch: str, context: Sequence[str]) -> float:
        """Natural-log ``p(ch | context)``; ``context`` is a token list that may start with ``<s>``."""
        w = ch if ch in (EOS, UNK_TOKEN) else self._map(ch)
        h = tuple(self._map(c) if c != BOS else BOS for c in context)[max(0, len(context) - self.order + 1):]
        acc = 0.0
        while True:
            p = self.prob.get(h + (w,))
            if p is not None and (h or w != BOS):
                return acc + p
            if not h:
                return acc + self.prob[(UNK_TOKEN,)]
            acc += self.backoff.get(h, 0.0)
            h = h[1:]

    def context_of(self, text: str) -> list[str]:
        return [BOS] + _chars(text)

    def save_arpa(self, path: str | os.PathLike) -> None:
        def tok(t: str) -> str:
            return ARPA_SPACE if t == " " else t

        by_order: dict[int, list] = defaultdict(list)
        for k, v in self.prob.items():
            by_order[len(k)].append(k)
        lines = ["\\data\\"]
        lines += [f"ngram {n}={len(by_order[n])}" for n in range(1, self.order + 1)]
        for n in range(1, self.order + 1):
            lines += ["", f"\\{n}-grams:"]
            for k in by_order[n]:
                row = f"{self.prob[k] / LOG10:.12g}\t{' '.join(tok(t) for t in k)}"
                if k in self.backoff:
                    row += f"\t{self.backoff[k] / LOG10:.12g}"
                lines.append(row)
        lines += ["", "\\end\\", ""]
        Path(path).write_text("\n".join(lines), encoding="utf-8")

    @classmethod
    def load_arpa(cls, path: str | os.PathLike, discount: float = 0.75) -> "CharNGramLM":
        def tok(t: str) -> str:
            return " " if t == ARPA_SPACE else t

        prob, backoff = {}, {}
        order, section = 0, None
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line == "\\data\\":
                continue
            if line.startswith("ngram "):
                order = max(order, int(line.split()[1].split("=")[0]))
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:].split("-")[0])
                continue
            if line == "\\end\\":
                break
            parts = raw.split("\t")
            key = tuple(tok(t) for t in parts[1].split(" "))
            if len(key) != section:
                raise ValueError(f"{path}: {section}-gram section has entry {parts[1]!r}")
            prob[key] = float(parts[0]) * LOG10
            if len(parts) > 2:
                backoff[key] = float(parts[2]) * LOG10
        if not order:
            raise ValueError(f"{path}: no \\data\\ header")
        return cls(order=order, prob=prob, backoff=backoff, discount=discount)


def train_char_lm(transcripts: Iterable[str], order: int = 4, discount: float = 0.75) -> CharNGramLM:
    """Interpolated absolute discounting, bottoming out in a uniform distribution over the symbols."""
    if order < 1:
        raise ValueError("order must be >= 1")
    sents = [[BOS] + _chars(t) + [EOS] for t in transcripts]
    if not sents:
        raise ValueError("cannot train a language model on no transcripts")

    counts: list[dict[tuple[str, ...], int]] = [defaultdict(int) for _ in range(order + 1)]
    for s in sents:
        for n in range(1, order + 1):
            for i in range(len(s) - n + 1):
                gram = tuple(s[i:i + n])
                if gram[-1] == BOS:
                    continue
                counts[n][gram] += 1

    vocab = sorted({g[0] for g in counts[1]} | {UNK_TOKEN})
    lm = CharNGramLM(order=order, discount=discount)
    total = sum(counts[1].values())
    gamma0 = discount * len(counts[1]) / total
    for w in vocab:
        lm.prob[(w,)] = math.log(max(counts[1].get((w,), 0) - discount, 0.0) / total + gamma0 / len(vocab))
    # <s> is never predicted; it is listed so it can carry a backoff weight.
    lm.prob[(BOS,)] = -99.0 * LOG10

    for n in range(2, order + 1):
        ctx_total: dict[tuple[str, ...], int] = defaultdict(int)
        ctx_types: dict[tuple[str, ...], int] = defaultdict(int)
        for gram, c in counts[n].items():
            ctx_total[gram[:-1]] += c
            ctx_types[gram[:-1]] += 1
        for h, c in ctx_total.items():
            lm.backoff[h] = math.log(discount * ctx_types[h] / c)
        for gram, c in counts[n].items():
            h = gram[:-1]
            lower = math.exp(lm.cond_logprob(gram[-1], list(h[1:])))
            lm.prob[gram] = math.log((c - discount) / ctx_total[h] + math.exp(lm.backoff[h]) * lower)
    return lm


def lm_logprob(lm: CharNGramLM, text: str) -> float:
    """Sum of natural-log conditional probabilities of the characters of ``text`` (no end marker)."""
    ctx = [BOS]
    total = 0.0
    for ch in _chars(text):
        total += lm.cond_logprob(ch, ctx)
        ctx.append(ch)
    return total


# -- beam search ---------------------------------------------------------------

NEG_INF = float("-inf")


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def word_count(text: str) -> int:
    return len(tokenize_for_ler(text))


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    text: str
    log_blank: float
    log_nonblank: float
    log_lm: float = 0.0
    words: int = 0
    score: float = 0.0

    @property
    def log_acoustic(self) -> float:
        return _lae(self.log_blank, self.log_nonblank)


def beam_decode(
    logprobs,
    vocab: Vocabulary,
    lm: CharNGramLM | None = None,
    alpha: float = 1.25,
    beta: float = 1.5,
    beam: int = 64,
    nbest: int = 1,
) -> list[Hypothesis]:
    """CTC prefix beam search ranking prefixes by ``acoustic + alpha*LM + beta*words``.

    Returns up to ``nbest`` hypotheses, best first.
    """
    if beam < 1 or nbest < 1 or nbest > beam:
        raise ValueError("need 1 <= nbest <= beam")
    lp = np.asarray(logprobs.detach().cpu().numpy() if hasattr(logprobs, "detach") else logprobs, dtype=np.float64)
    if lp.size == 0:
        return [Hypothesis((), "", 0.0, NEG_INF)]
    if lp.shape[1] != len(vocab):
        raise ValueError(f"log-probability width {lp.shape[1]} != vocabulary size {len(vocab)}")
    blank = vocab.blank
    use_lm = lm is not None and alpha != 0.0
    lm_cache: dict[tuple[int, ...], float] = {(): 0.0}
    text_cache: dict[tuple[int, ...], str] = {(): ""}

    def text_of(prefix):
        if prefix not in text_cache:
            text_cache[prefix] = text_of(prefix[:-1]) + vocab.render(prefix[-1])
        return text_cache[prefix]

    def lm_of(prefix):
        if prefix not in lm_cache:
            parent = lm_of(prefix[:-1])
            ch = vocab.render(prefix[-1])
            lm_cache[prefix] = parent + lm.cond_logprob(ch, lm.context_of(text_of(prefix[:-1])))
        return lm_cache[prefix]

    def score(prefix, pb, pnb):
        s = _lae(pb, pnb)
        if use_lm:
            s += alpha * lm_of(prefix)
        if beta:
            s += beta * word_count(text_of(prefix))
        return s

    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    symbols = [c for c in range(lp.shape[1]) if c != blank]
    for t in range(lp.shape[0]):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = _lae(pb, pnb)
            cell = nxt[prefix]
            cell[0] = _lae(cell[0], total + row[blank])
            last = prefix[-1] if prefix else None
            for c in symbols:
                p = row[c]
                if p == NEG_INF:
                    continue
                ext = nxt[prefix + (c,)]
                if c == last:
                    ext[1] = _lae(ext[1], pb + p)
                    cell[1] = _lae(cell[1], pnb + p)
                else:
                    ext[1] = _lae(ext[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-score(kv[0], *kv[1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam]}

    hyps = []
    for prefix, (pb, pnb) in beams.items():
        text = text_of(prefix)
        h = Hypothesis(prefix, text, pb, pnb,
                       log_lm=lm_of(prefix) if use_lm else 0.0,
                       words=word_count(text))
        h.score = score(prefix, pb, pnb)
        hyps.append(h)
    hyps.sort(key=lambda h: (-h.score, h.tokens))
    return hyps[:nbest]
