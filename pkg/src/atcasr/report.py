"""Figures and delimited tables written next to every stage's outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def write_tsv(path: str | Path, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> None:
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), delimiter="\t", lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in columns})


def plot_curves(path: str | Path, rows: Sequence[Mapping], x: str, ys: Sequence[str],
                title: str = "", logy: bool = False) -> Path:
    """Line plot of the ``ys`` columns of ``rows`` against ``x``; missing columns are skipped."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for y in ys:
        pts = [(r[x], r[y]) for r in rows if r.get(y) is not None]
        if pts:
            xs, vs = zip(*pts)
            ax.plot(xs, vs, label=y, marker="." if len(pts) < 50 else None)
    ax.set_xlabel(x)
    if logy:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_ler_summary(path: str | Path, overall: float, per_language: Mapping[str, float],
                     per_utterance: Sequence[float]) -> Path:
    """Bar chart of overall and per-language LER beside a histogram of per-utterance LER."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    names = ["all"] + sorted(per_language)
    vals = [overall] + [per_language[k] for k in sorted(per_language)]
    a.bar(names, vals, color=["#444"] + ["#7a9"] * (len(names) - 1))
    a.set_ylabel("LER")
    a.set_title("label error rate")
    if per_utterance:
        b.hist(per_utterance, bins=min(20, max(5, len(per_utterance) // 2)), color="#79b")
    b.set_xlabel("per-utterance LER")
    b.set_ylabel("utterances")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
