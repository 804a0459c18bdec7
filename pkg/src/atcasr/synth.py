"""Synthetic bilingual tone corpus standing in for real labeled and unlabeled speech.

Each grapheme of a six-symbol alphabet (two Chinese characters, four Latin
letters) is a pure tone; words are separated by noise-only gaps. Adjacent
graphemes inside a word always differ, so every transcript is recoverable
from the audio. Every utterance gets its own speaking rate, channel gain
and signal-to-noise ratio, mimicking a shared radio channel.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .corpus import DEFAULT_SAMPLE_RATE, Utterance, Waveform, write_manifest, write_wav

TONES = {"上": 300.0, "升": 520.0, "A": 800.0, "B": 1150.0, "C": 1650.0, "D": 2300.0}
CJK_SYMBOLS = ("上", "升")
LATIN_SYMBOLS = ("A", "B", "C", "D")

GRAPHEME_SEC = 0.09
WORD_GAP_SEC = 0.12
EDGE_SEC = 0.05
FADE_SEC = 0.005
AMPLITUDE = 0.5
RATE_RANGE = (0.8, 1.25)
GAIN_DB = (-20.0, 0.0)
SNR_DB = (10.0, 30.0)


def _word(symbols, lo, hi, rng) -> str:
    n = int(rng.integers(lo, hi + 1))
    out = [symbols[int(rng.integers(len(symbols)))]]
    while len(out) < n:
        ch = symbols[int(rng.integers(len(symbols)))]
        if ch != out[-1]:
            out.append(ch)
    return "".join(out)


def random_transcript(rng: np.random.Generator) -> tuple[str, str]:
    lang = ("zh", "en", "mixed")[int(rng.integers(3))]
    if lang == "zh":
        return _word(CJK_SYMBOLS, 2, 4, rng), lang
    if lang == "en":
        return " ".join(_word(LATIN_SYMBOLS, 2, 3, rng) for _ in range(int(rng.integers(1, 3)))), lang
    words = [_word(CJK_SYMBOLS, 2, 2, rng), _word(LATIN_SYMBOLS, 2, 3, rng)]
    if rng.random() < 0.5:
        words.reverse()
    return " ".join(words), lang


def render(text: str, rng: np.random.Generator, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Tone sequence for ``text`` with random speaking rate, gain and additive noise level."""
    rate = rng.uniform(*RATE_RANGE)
    gain = 10.0 ** (rng.uniform(*GAIN_DB) / 20.0)
    snr = rng.uniform(*SNR_DB)
    pieces = [np.zeros(int(EDGE_SEC * sample_rate))]
    fade = int(FADE_SEC * sample_rate)
    for ch in text:
        if ch == " ":
            pieces.append(np.zeros(int(WORD_GAP_SEC / rate * sample_rate)))
            continue
        n = int(GRAPHEME_SEC / rate * rng.uniform(0.9, 1.1) * sample_rate)
        t = np.arange(n) / sample_rate
        tone = AMPLITUDE * np.sin(2 * np.pi * TONES[ch] * t + rng.uniform(0, 2 * np.pi))
        env = np.ones(n)
        env[:fade] = np.linspace(0.0, 1.0, fade)
        env[-fade:] = np.linspace(1.0, 0.0, fade)
        pieces.append(tone * env)
    pieces.append(np.zeros(int(EDGE_SEC * sample_rate)))
    x = gain * np.concatenate(pieces)
    noise_std = gain * AMPLITUDE / np.sqrt(2.0) * 10.0 ** (-snr / 20.0)
    x = x + noise_std * rng.standard_normal(x.size)
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


def split_sizes(n: int) -> tuple[int, int, int]:
    held = max(1, int(round(0.15 * n)))
    return n - 2 * held, held, held


def synth_corpus(out_dir: str | os.PathLike, n_utts: int = 30, seed: int = 0, n_unlabeled: int | None = None,
                 sample_rate: int = DEFAULT_SAMPLE_RATE) -> dict[str, list[Utterance]]:
    """Write WAVs plus ``train``/``dev``/``test``/``unlabeled`` JSONL manifests under ``out_dir``."""
    if n_utts < 3:
        raise ValueError("need at least 3 utterances (one per split)")
    n_unlabeled = 4 * n_utts if n_unlabeled is None else n_unlabeled
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train, n_dev, n_test = split_sizes(n_utts)
    names = ["train"] * n_train + ["dev"] * n_dev + ["test"] * n_test + ["unlabeled"] * n_unlabeled
    splits: dict[str, list[Utterance]] = {"train": [], "dev": [], "test": [], "unlabeled": []}
    for i, split in enumerate(names):
        text, lang = random_transcript(rng)
        wave = render(text, rng, sample_rate)
        uid = f"{split}-{i:05d}"
        path = out / "wav" / f"{uid}.wav"
        write_wav(path, wave)
        splits[split].append(Utterance(
            id=uid, audio_path=str(path), duration=wave.duration,
            transcript=None if split == "unlabeled" else text, language=lang,
        ))
    for split, utts in splits.items():
        write_manifest(out / f"{split}.jsonl", utts, relative_to=out)
    return splits
