"""Audio loading, log-mel features, manifests and batching."""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

DEFAULT_SAMPLE_RATE = 16000
SUPPORTED_RATES = (8000, 16000)
LANGUAGES = ("zh", "en", "mixed", "unknown")
LOG_FLOOR = 1e-10


class UnsupportedAudioError(ValueError):
    pass


class TooShortError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValueError(f"sample rate {self.sample_rate} not in {SUPPORTED_RATES}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, D)
    frame_rate: float = 100.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or min(self.frames.shape) < 1:
            raise ValueError(f"features must be a non-empty T x D matrix, got shape {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]


@dataclass
class Utterance:
    id: str
    audio_path: str
    duration: float
    transcript: str | None = None
    language: str = "unknown"

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"utterance {self.id!r}: duration must be positive")
        if self.language not in LANGUAGES:
            raise ValueError(f"utterance {self.id!r}: unknown language {self.language!r}")

    def to_json(self) -> dict:
        d = {"id": self.id, "audio": self.audio_path, "duration": round(self.duration, 6)}
        if self.transcript is not None:
            d["text"] = self.transcript
        d["lang"] = self.language
        return d


# -- audio -------------------------------------------------------------------

def load_waveform(path: str | os.PathLike, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV as mono float samples in [-1, 1] at ``sample_rate``."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(os.fspath(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError) as e:
        raise UnsupportedAudioError(f"{path}: not a readable PCM WAV ({e})") from None

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise UnsupportedAudioError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = np.clip(x, -1.0, 1.0)
    if rate != sample_rate:
        g = math.gcd(int(rate), int(sample_rate))
        x = resample_poly(x, sample_rate // g, int(rate) // g)
        x = np.clip(x, -1.0, 1.0)
    return Waveform(x, sample_rate)


def write_wav(path: str | os.PathLike, wave: Waveform) -> None:
    """Write 16-bit PCM."""
    pcm = np.round(np.clip(wave.samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    wavfile.write(os.fspath(path), wave.sample_rate, pcm)


# -- filterbank ---------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Peak frequency (Hz) of each triangular filter."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters, equally spaced on the HTK mel scale."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def compute_fbank(wave: Waveform, n_mels: int = 40, win_ms: float = 25.0, hop_ms: float = 10.0) -> FeatureSequence:
    win = int(round(wave.sample_rate * win_ms / 1000))
    hop = int(round(wave.sample_rate * hop_ms / 1000))
    x = wave.samples
    if x.size < win:
        raise TooShortError(f"{x.size} samples is shorter than one {win}-sample window")
    n_frames = 1 + (x.size - win) // hop
    n_fft = 1 << (win - 1).bit_length()
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(win + 1)[:-1]
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    energy = mag @ mel_filterbank(n_mels, n_fft, wave.sample_rate).T
    return FeatureSequence(np.log(np.maximum(energy, LOG_FLOOR)), frame_rate=wave.sample_rate / hop)


# -- chunking and batching ---------------------------------------------------

def chunk_for_srl(waves: Sequence[Waveform], chunk_seconds: float = 10.0) -> list[Waveform]:
    """Concatenate ``waves`` and cut into consecutive fixed-length chunks.

    A trailing remainder shorter than one second is dropped.
    """
    if not waves:
        return []
    rate = waves[0].sample_rate
    if any(w.sample_rate != rate for w in waves):
        raise ValueError("all waves must share one sample rate")
    if len(waves) == 1:
        x = waves[0].samples
    else:
        x = np.concatenate([w.samples for w in waves])
    size = int(round(chunk_seconds * rate))
    chunks = [Waveform(x[i:i + size], rate) for i in range(0, x.size, size)]
    if chunks and len(chunks[-1]) < rate:
        chunks.pop()
    return chunks


def make_batches(manifest: Sequence[Utterance], epoch: int, batch_size: int, seed: int = 0) -> list[list[Utterance]]:
    """Group utterances for one epoch (1-based).

    Epoch 1 is sorted by ascending duration; later epochs use a permutation
    drawn from an RNG keyed on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if epoch <= 1:
        order = sorted(range(len(manifest)), key=lambda i: manifest[i].duration)
    else:
        order = np.random.default_rng([seed, epoch]).permutation(len(manifest)).tolist()
    ordered = [manifest[i] for i in order]
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]


def pad_even(frames: np.ndarray) -> np.ndarray:
    """Repeat the last frame when the frame count is odd."""
    if frames.shape[0] % 2:
        return np.concatenate([frames, frames[-1:]], axis=0)
    return frames


# -- manifests ---------------------------------------------------------------

def read_manifest(path: str | os.PathLike, require_text: bool = False) -> list[Utterance]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                audio = d["audio"]
                if audio and not os.path.isabs(audio):
                    audio = str(path.parent / audio)
                utt = Utterance(
                    id=str(d["id"]),
                    audio_path=audio,
                    duration=float(d["duration"]),
                    transcript=d.get("text"),
                    language=d.get("lang", "unknown"),
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad manifest line ({e})") from None
            if require_text and utt.transcript is None:
                raise ValueError(f"{path}:{lineno}: utterance {utt.id!r} has no transcript")
            out.append(utt)
    return out


def write_manifest(path: str | os.PathLike, utts: Iterable[Utterance], relative_to: str | os.PathLike | None = None) -> None:
    base = Path(relative_to) if relative_to is not None else None
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u in utts:
            d = u.to_json()
            if base is not None:
                d["audio"] = os.path.relpath(u.audio_path, base)
            fh.write(json.dumps(d, ensure_ascii=False) + "\n")


@dataclass
class FeatureCache:
    """Memoises per-utterance arrays (waveforms or fixed features) by id."""

    sample_rate: int = DEFAULT_SAMPLE_RATE
    _items: dict = field(default_factory=dict)

    def wave(self, utt: Utterance) -> Waveform:
        key = ("wave", utt.id)
        if key not in self._items:
            self._items[key] = load_waveform(utt.audio_path, self.sample_rate)
        return self._items[key]

    def get(self, key, make):
        if key not in self._items:
            self._items[key] = make()
        return self._items[key]
