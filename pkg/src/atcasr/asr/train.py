"""Supervised CTC training of the full wave-to-text network under the experiment presets."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..corpus import FeatureCache, Utterance, Waveform, compute_fbank, make_batches, pad_even
from ..metrics import ler
from ..nn import (
    AdamState,
    LRSchedule,
    ParameterStore,
    adam_step,
    clip_grad_norm,
    grads_of,
    halving_schedule,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    zero_grads,
)
from ..srl import DivergenceError, SRLConfig, SRLModel, TrainHistory
from ..vocab import Vocabulary, encode_text
from .ctc import ctc_loss_batch, greedy_decode, min_frames
from .model import Backbone, BackboneConfig, PredictionLayer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Preset:
    """One experiment configuration: input features and training strategy."""

    features: str                  # "fbank" or "srl"
    pretrained_backbone: bool
    integrated: bool
    languages: tuple[str, ...] | None = None   # restrict the labeled set; None keeps all


PRESETS: dict[str, Preset] = {
    "A1": Preset("fbank", False, False, ("zh",)),
    "A2": Preset("fbank", False, False, ("en",)),
    "A3": Preset("fbank", False, False),
    "B1": Preset("srl", False, False),
    "B2": Preset("srl", False, False),
    "B3": Preset("srl", False, False),
    "C1": Preset("srl", True, False),
    "C2": Preset("srl", False, True),
    "C3": Preset("srl", True, True),
    "C4": Preset("srl", True, True),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


@dataclass
class FbankConfig:
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0


@dataclass
class ASRTrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-4
    halve_every: int = 25
    warmup_iters: int = 1000          # integrated presets only
    warmup_start_lr: float = 1e-5
    patience: int | None = 10         # early stopping on validation loss; None disables
    seed: int = 0
    max_grad_norm: float = 10.0
    srl_lr_scale: float = 1.0         # rate multiplier for SRL weights under integrated training
    train_ler_every: int = 0          # 0 disables per-epoch training-set LER
    target_val_loss: float | None = None  # stop once validation loss reaches this value
    fbank: FbankConfig = field(default_factory=FbankConfig)

    def schedule(self, integrated: bool) -> LRSchedule:
        if integrated:
            return halving_schedule(self.lr, self.halve_every, self.warmup_iters, self.warmup_start_lr)
        return halving_schedule(self.lr, self.halve_every)

    def to_dict(self) -> dict:
        return asdict(self)


class ASRModel(nn.Module):
    """Front-end (filterbank or SRL context vectors) -> backbone -> per-frame grapheme log-probabilities."""

    def __init__(self, features: str, backbone: Backbone, predict: PredictionLayer,
                 srl: SRLModel | None = None, fbank: FbankConfig | None = None):
        super().__init__()
        if features not in ("fbank", "srl"):
            raise ValueError(f"unknown feature kind {features!r}")
        if features == "srl" and srl is None:
            raise ValueError("SRL features need an SRL model")
        self.features_kind = features
        self.fbank = fbank or FbankConfig()
        self.srl = srl if features == "srl" else None
        self.backbone = backbone
        self.predict = predict

    @property
    def dtype(self) -> torch.dtype:
        return next(self.backbone.parameters()).dtype

    def feature_dim(self) -> int:
        return self.srl.config.dim if self.srl is not None else self.fbank.n_mels

    def fixed_features(self, wave: Waveform) -> np.ndarray:
        if self.srl is None:
            fb = self.fbank
            return compute_fbank(wave, fb.n_mels, fb.win_ms, fb.hop_ms).frames
        x = torch.as_tensor(wave.samples, dtype=self.dtype)[None]
        with torch.no_grad():
            return self.srl(x)[1][0].double().numpy()

    def srl_features(self, waves: Sequence[Waveform]) -> tuple[torch.Tensor, list[int]]:
        """Differentiable SRL features, each sequence padded to even length by repeating its last frame."""
        c, lens = self.srl.features(waves)
        return even_pad(c, lens)

    def forward(self, feats: torch.Tensor, lengths: list[int]) -> tuple[torch.Tensor, list[int]]:
        hidden = self.backbone(feats, lengths)
        return self.predict(hidden), [n // 2 for n in lengths]

    def store(self) -> ParameterStore:
        store = ParameterStore()
        for prefix, mod in (("srl.", self.srl), ("backbone.", self.backbone), ("predict.", self.predict)):
            if mod is not None:
                for n, p in mod.named_parameters():
                    store.add(prefix + n, p)
        return store


def even_pad(x: torch.Tensor, lens: list[int]) -> tuple[torch.Tensor, list[int]]:
    """Pad (B, T, D) so every valid length is even, repeating each odd sequence's last frame."""
    new_lens = [n + n % 2 for n in lens]
    T = max(new_lens)
    T += T % 2
    if T > x.shape[1]:
        x = torch.cat([x, x.new_zeros(x.shape[0], T - x.shape[1], x.shape[2])], dim=1)
    rows = []
    for b, n in enumerate(lens):
        if n % 2:
            rows.append(torch.cat([x[b, :n], x[b, n - 1:n], x[b, n + 1:]], dim=0))
        else:
            rows.append(x[b])
    return torch.stack(rows), new_lens


def stack_features(seqs: Sequence[np.ndarray], dtype) -> tuple[torch.Tensor, list[int]]:
    seqs = [pad_even(s) for s in seqs]
    lens = [s.shape[0] for s in seqs]
    x = torch.zeros(len(seqs), max(lens), seqs[0].shape[1], dtype=dtype)
    for i, s in enumerate(seqs):
        x[i, : lens[i]] = torch.as_tensor(s, dtype=dtype)
    return x, lens


def build_model(preset: Preset, vocab: Vocabulary, backbone_config: BackboneConfig,
                srl: SRLModel | None = None, fbank: FbankConfig | None = None,
                dtype: torch.dtype = torch.float32, seed: int = 0) -> ASRModel:
    torch.manual_seed(seed)
    fbank = fbank or FbankConfig()
    in_dim = srl.config.dim if preset.features == "srl" else fbank.n_mels
    backbone = Backbone(in_dim, backbone_config, dtype=dtype)
    predict = PredictionLayer(backbone_config.out_dim, len(vocab), dtype=dtype)
    if srl is not None:
        srl = srl.to(dtype)
    return ASRModel(preset.features, backbone, predict, srl if preset.features == "srl" else None, fbank)


def asr_metadata(model: ASRModel, vocab: Vocabulary, preset_name: str, **extra) -> dict[str, str]:
    meta = {
        "stage": "asr",
        "preset": preset_name,
        "features": model.features_kind,
        "fbank_config": json.dumps(asdict(model.fbank)),
        "backbone_config": json.dumps(model.backbone.config.to_dict()),
        "in_dim": str(model.backbone.in_dim),
        "vocab_size": str(len(vocab)),
        "vocab_sha256": vocab.digest(),
    }
    if model.srl is not None:
        meta["srl_config"] = json.dumps(model.srl.config.to_dict())
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def load_asr(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[ASRModel, dict[str, str]]:
    values, meta = load_checkpoint(path)
    if meta.get("stage") != "asr":
        raise ValueError(f"{path}: not a full-model checkpoint (stage={meta.get('stage')!r})")
    srl = None
    if meta["features"] == "srl":
        srl = SRLModel(SRLConfig.from_dict(json.loads(meta["srl_config"])), dtype=dtype)
    backbone = Backbone(int(meta["in_dim"]), BackboneConfig.from_dict(json.loads(meta["backbone_config"])), dtype=dtype)
    predict = PredictionLayer(backbone.config.out_dim, int(meta["vocab_size"]), dtype=dtype)
    fbank = FbankConfig(**json.loads(meta["fbank_config"]))
    model = ASRModel(meta["features"], backbone, predict, srl, fbank)
    model.store().load(values)
    return model, meta


# -- batches -----------------------------------------------------------------

class BatchBuilder:
    """Turns utterances into padded feature tensors, caching anything that does not train."""

    def __init__(self, model: ASRModel, trainable_frontend: bool, cache: FeatureCache | None = None):
        self.model = model
        self.trainable_frontend = trainable_frontend
        self.cache = cache or FeatureCache()

    def __call__(self, utts: Sequence[Utterance]) -> tuple[torch.Tensor, list[int]]:
        m = self.model
        if m.srl is not None and self.trainable_frontend:
            return m.srl_features([self.cache.wave(u) for u in utts])
        seqs = [self.cache.get(("feat", m.features_kind, u.id), lambda u=u: m.fixed_features(self.cache.wave(u)))
                for u in utts]
        return stack_features(seqs, m.dtype)


def output_frames(builder: BatchBuilder, utt: Utterance) -> int:
    m = builder.model
    if m.srl is not None and builder.trainable_frontend:
        n = m.srl.config.output_length(len(builder.cache.wave(utt)))
    else:
        n = builder([utt])[1][0]
    return (n + n % 2) // 2


def logprobs_for(model: ASRModel, builder: BatchBuilder, utts: Sequence[Utterance]) -> list[torch.Tensor]:
    """Per-utterance (T', V) log-probabilities, computed without gradients."""
    with torch.no_grad():
        x, lens = builder(utts)
        lp, out_lens = model(x, lens)
    return [lp[i, : out_lens[i]] for i in range(len(utts))]


def evaluate_loss(model: ASRModel, builder: BatchBuilder, utts: Sequence[Utterance], vocab: Vocabulary,
                  batch_size: int = 32) -> float:
    losses = []
    for i in range(0, len(utts), batch_size):
        batch = utts[i:i + batch_size]
        with torch.no_grad():
            x, lens = builder(batch)
            lp, out_lens = model(x, lens)
            labels = [encode_text(u.transcript, vocab) for u in batch]
            losses += ctc_loss_batch(lp, labels, out_lens, blank=vocab.blank).tolist()
    return float(np.mean(losses)) if losses else float("nan")


def greedy_ler(model: ASRModel, builder: BatchBuilder, utts: Sequence[Utterance], vocab: Vocabulary,
               batch_size: int = 32) -> float:
    pairs = []
    for i in range(0, len(utts), batch_size):
        batch = utts[i:i + batch_size]
        for u, lp in zip(batch, logprobs_for(model, builder, batch)):
            pairs.append((u.transcript, greedy_decode(lp, vocab)))
    return ler(pairs)


# -- training ----------------------------------------------------------------

def _check_labeled(utts: Sequence[Utterance], what: str) -> None:
    if not utts:
        raise ValueError(f"empty {what} manifest")
    missing = [u.id for u in utts if u.transcript is None]
    if missing:
        raise ValueError(f"{what} utterances without transcripts: {missing[:5]}")


def train_asr(
    train_utts: Sequence[Utterance],
    dev_utts: Sequence[Utterance],
    vocab: Vocabulary,
    preset_name: str,
    out_path: str | Path,
    backbone_config: BackboneConfig,
    config: ASRTrainConfig | None = None,
    srl: SRLModel | None = None,
    backbone_init: Backbone | None = None,
    dtype: torch.dtype = torch.float32,
    cache: FeatureCache | None = None,
) -> tuple[ASRModel, TrainHistory]:
    """Train under ``preset_name``; the best-validation-loss weights are saved to ``out_path`` and returned.

    SRL weights stay bit-identical unless the preset is integrated.
    """
    config = config or ASRTrainConfig()
    preset = get_preset(preset_name)
    if preset.languages is not None:
        train_utts = [u for u in train_utts if u.language in preset.languages]
        dev_utts = [u for u in dev_utts if u.language in preset.languages]
    _check_labeled(train_utts, "training")
    if dev_utts:
        _check_labeled(dev_utts, "validation")
    if preset.features == "srl" and srl is None:
        raise ValueError(f"preset {preset_name} needs an SRL checkpoint")
    if preset.pretrained_backbone and backbone_init is None:
        raise ValueError(f"preset {preset_name} needs a pretrained backbone checkpoint")

    model = build_model(preset, vocab, backbone_config, srl, config.fbank, dtype, config.seed)
    if backbone_init is not None and preset.pretrained_backbone:
        if backbone_init.in_dim != model.backbone.in_dim:
            raise ValueError(f"pretrained backbone takes {backbone_init.in_dim}-dim input, model needs {model.backbone.in_dim}")
        ParameterStore.of(model.backbone).load(ParameterStore.of(backbone_init).snapshot())

    builder = BatchBuilder(model, trainable_frontend=preset.integrated, cache=cache)
    params = model.store() if preset.integrated else ParameterStore(
        {n: p for n, p in model.store().items() if not n.startswith("srl.")}
    )
    if model.srl is not None:
        model.srl.requires_grad_(preset.integrated)

    # Utterances whose label cannot fit the output length are dropped up front.
    kept, dropped = [], []
    for u in train_utts:
        (kept if min_frames(encode_text(u.transcript, vocab)) <= output_frames(builder, u) else dropped).append(u)
    if dropped:
        log.warning("dropping %d training utterances too short for their labels", len(dropped))
    if not kept:
        raise ValueError("no training utterance can be aligned to its label")
    train_utts = kept

    lr_scale = {n: config.srl_lr_scale for n in params if n.startswith("srl.")} if config.srl_lr_scale != 1.0 else None
    schedule = config.schedule(preset.integrated)
    meta = dict(seed=config.seed, train_config=json.dumps(config.to_dict(), default=str))
    history = TrainHistory()
    state = AdamState()
    best = float("inf")
    since_best = 0
    it = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        losses = []
        for batch in make_batches(train_utts, epoch, config.batch_size, config.seed):
            x, lens = builder(batch)
            lr = lr_at(schedule, it, epoch - 1)
            zero_grads(params)
            lp, out_lens = model(x, lens)
            labels = [encode_text(u.transcript, vocab) for u in batch]
            loss = ctc_loss_batch(lp, labels, out_lens, blank=vocab.blank).mean()
            if not torch.isfinite(loss):
                log.error("ASR training diverged at epoch %d iteration %d", epoch, it)
                raise DivergenceError(f"non-finite CTC loss {loss.item()}")
            loss.backward()
            clip_grad_norm(params, config.max_grad_norm)
            adam_step(params, grads_of(params), state, lr, lr_scale)
            losses.append(loss.item())
            it += 1
        model.eval()
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, builder, dev_utts, vocab) if dev_utts else train_loss
        row = dict(epoch=epoch, lr=lr, train_loss=train_loss, val_loss=val_loss)
        if config.train_ler_every and epoch % config.train_ler_every == 0:
            row["train_ler"] = greedy_ler(model, builder, train_utts, vocab)
        history.log(**row)
        log.info("asr %s epoch %d train %.4f val %.4f", preset_name, epoch, train_loss, val_loss)
        if val_loss < best:
            best, since_best = val_loss, 0
            save_checkpoint(out_path, model.store(), asr_metadata(model, vocab, preset_name, epoch=epoch,
                                                                  val_loss=val_loss, **meta))
            if config.target_val_loss is not None and val_loss <= config.target_val_loss:
                log.info("validation loss %.4f reached target %.4f", val_loss, config.target_val_loss)
                break
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                log.info("early stop after %d epochs without improvement", since_best)
                break
    zero_grads(params)
    if not Path(out_path).exists():
        save_checkpoint(out_path, model.store(), asr_metadata(model, vocab, preset_name, epoch=0, **meta))
    values, _ = load_checkpoint(out_path)
    model.store().load(values)
    return model, history
