"""Command-line entry point: ``atcasr <stage> [--config file.json] [--flag value ...]``.

Values come from stage defaults, then the JSON config file, then flags.
Relative input paths that do not exist under the working directory are
looked up under ``$ATCASR_DATA_ROOT``. Every stage validates its inputs
before creating anything and echoes its resolved configuration to
``config.json`` in its output directory.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__

ENV_DATA_ROOT = "ATCASR_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("atcasr")


class UsageError(Exception):
    pass


def data_root() -> Path:
    return Path(os.environ.get(ENV_DATA_ROOT, "."))


# -- option tables -----------------------------------------------------------

def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v) -> tuple[int, ...]:
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(" ", "").split(",") if x)


def _opt_int(v):
    return None if v is None or str(v).lower() in ("", "none") else int(v)


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[Any], Any]
    default: Any
    help: str
    role: str = ""            # "in" (existing file), "out" (directory to create) or ""
    choices: tuple = ()


def _p(name, default, help, role="in"):
    return Opt(name, lambda v: None if v is None else str(v), default, help, role)


SEED = Opt("seed", int, 0, "random seed")
DTYPE = Opt("dtype", str, "float32", "tensor precision", choices=("float32", "float64"))
BACKBONE_OPTS = [
    Opt("backbone_size", str, "full", "base backbone configuration", choices=("full", "small")),
    Opt("branch_channels", _opt_int, None, "override: channels per convolution branch"),
    Opt("stride_channels", _opt_int, None, "override: channels of the strided convolution"),
    Opt("lstm_layers", _opt_int, None, "override: recurrent layers"),
    Opt("lstm_hidden", _opt_int, None, "override: hidden units per direction"),
]
FBANK_OPTS = [Opt("n_mels", int, 40, "filterbank channels for fbank features")]


def _out(stage):
    return _p("out_dir", f"runs/{stage}", "output directory", "out")


STAGES: dict[str, tuple[str, list[Opt]]] = {
    "synth-corpus": ("generate the synthetic tone corpus", [
        _p("out_dir", None, "corpus directory (default: the data root)", "out"),
        Opt("n_utts", int, 30, "labeled utterances split into train/dev/test"),
        Opt("n_unlabeled", _opt_int, None, "unlabeled utterances (default 4x n_utts)"),
        SEED,
    ]),
    "vocab-build": ("build the grapheme vocabulary from transcripts", [
        _p("manifest", "train.jsonl", "labeled manifest"),
        _out("vocab-build"),
    ]),
    "srl-train": ("self-supervised representation learning on raw audio", [
        _p("manifest", "unlabeled.jsonl", "audio manifest (transcripts ignored)"),
        _out("srl-train"),
        Opt("epochs", int, 10, "training epochs"),
        Opt("batch_size", int, 8, "chunks per batch"),
        Opt("size", str, "full", "base network configuration", choices=("full", "small")),
        Opt("enc_channels", _opt_int, None, "override: encoder channels"),
        Opt("ctx_channels", _opt_int, None, "override: context channels"),
        Opt("enc_kernels", lambda v: None if v is None else _ints(v), None, "override: encoder kernels, e.g. 10,8,4,4,4"),
        Opt("enc_strides", lambda v: None if v is None else _ints(v), None, "override: encoder strides"),
        Opt("ctx_kernels", lambda v: None if v is None else _ints(v), None, "override: context kernels"),
        Opt("steps", _opt_int, None, "override: prediction steps"),
        Opt("negatives", _opt_int, None, "override: negatives per anchor"),
        Opt("chunk_seconds", lambda v: None if v is None else float(v), None, "override: chunk length in seconds"),
        Opt("peak_lr", float, 1e-3, "cosine schedule peak rate"),
        Opt("min_lr", float, 1e-9, "cosine schedule floor"),
        Opt("warmup_iters", int, 500, "linear warmup iterations"),
        Opt("warmup_start_lr", float, 1e-7, "rate at iteration 0"),
        Opt("max_grad_norm", float, 10.0, "global gradient-norm clip"),
        SEED, DTYPE,
    ]),
    "pretrain": ("masked-frame reconstruction pretraining of the backbone", [
        _p("manifest", "unlabeled.jsonl", "audio manifest (transcripts ignored)"),
        _p("srl", None, "SRL checkpoint providing input features (omit for filterbanks)"),
        _out("pretrain"),
        Opt("epochs", int, 10, "training epochs"),
        Opt("batch_size", int, 64, "utterances per batch"),
        Opt("lr", float, 1e-4, "initial learning rate"),
        Opt("halve_every", int, 25, "halve the rate every this many epochs"),
        Opt("max_grad_norm", float, 10.0, "global gradient-norm clip"),
        *BACKBONE_OPTS, *FBANK_OPTS, SEED, DTYPE,
    ]),
    "asr-train": ("supervised CTC training under an experiment preset", [
        _p("train", "train.jsonl", "labeled training manifest"),
        _p("dev", "dev.jsonl", "labeled validation manifest"),
        _p("vocab", None, "vocabulary file (default: built from the training transcripts)"),
        Opt("preset", str, "C3", "experiment preset"),
        _p("srl", None, "SRL checkpoint (B and C presets)"),
        _p("backbone", None, "pretrained backbone checkpoint (C1, C3, C4)"),
        _out("asr-train"),
        Opt("epochs", int, 100, "maximum epochs"),
        Opt("batch_size", int, 128, "utterances per batch"),
        Opt("lr", float, 1e-4, "initial learning rate"),
        Opt("halve_every", int, 25, "halve the rate every this many epochs"),
        Opt("warmup_iters", int, 1000, "warmup iterations (integrated presets)"),
        Opt("warmup_start_lr", float, 1e-5, "warmup starting rate (integrated presets)"),
        Opt("srl_lr_scale", float, 1.0, "rate multiplier for SRL weights (integrated presets)"),
        Opt("patience", int, 10, "early-stopping patience in epochs (0 disables)"),
        Opt("max_grad_norm", float, 10.0, "global gradient-norm clip"),
        Opt("train_ler_every", int, 0, "log greedy training-set LER every N epochs (0 disables)"),
        Opt("target_val_loss", lambda v: None if v is None else float(v), None, "stop once validation loss reaches this"),
        *BACKBONE_OPTS, *FBANK_OPTS, SEED, DTYPE,
    ]),
    "lm-train": ("train a character n-gram LM (ARPA output)", [
        _p("manifest", "train.jsonl", "labeled manifest"),
        _out("lm-train"),
        Opt("order", int, 4, "n-gram order"),
        Opt("discount", float, 0.75, "absolute discount"),
        Opt("language", str, "all", "restrict to one language's transcripts", choices=("all", "zh", "en")),
    ]),
    "decode": ("greedy or LM beam decoding of a manifest", [
        _p("model", None, "full-model checkpoint"),
        _p("manifest", "test.jsonl", "manifest to decode"),
        _p("vocab", None, "vocabulary file (default: vocab.txt beside the model)"),
        _p("lm", None, "joint character LM (ARPA)"),
        _p("lm_zh", None, "LM for utterances classified as Chinese"),
        _p("lm_en", None, "LM for utterances classified as English"),
        _out("decode"),
        Opt("alpha", float, 1.25, "LM weight"),
        Opt("beta", float, 1.5, "word-count weight"),
        Opt("beam", int, 64, "beam width"),
        Opt("greedy", _bool, False, "greedy decoding only"),
    ]),
    "evaluate": ("score hypotheses against references", [
        _p("ref", "test.jsonl", "reference manifest"),
        _p("hyp", None, "hypotheses (hyps.jsonl from decode, or a manifest)"),
        _out("evaluate"),
        Opt("field", str, "hyp", "hypothesis field in the hyp file (falls back to 'text')"),
    ]),
}


# -- argument handling -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="atcasr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"atcasr {__version__}")
    sub = parser.add_subparsers(dest="stage", metavar="stage", parser_class=_Parser)
    for stage, (help_, opts) in STAGES.items():
        sp = sub.add_parser(stage, help=help_, description=help_, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON file of option values (flags override it)")
        sp.add_argument("--quiet", action="store_true", help="only log warnings")
        for o in opts:
            sp.add_argument("--" + o.name.replace("_", "-"), dest=o.name, metavar=o.name.upper(),
                            help=f"{o.help} (default: {o.default})")
    return parser


def resolve_config(stage: str, cli: dict[str, Any]) -> dict[str, Any]:
    """Merge defaults, the optional JSON file and flag values; coerce types and check choices."""
    opts = {o.name: o for o in STAGES[stage][1]}
    merged: dict[str, Any] = {n: o.default for n, o in opts.items()}
    cfg_path = cli.pop("config", None)
    if cfg_path is not None:
        try:
            file_cfg = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {cfg_path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {cfg_path} is not valid JSON: {e}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {cfg_path} must hold a JSON object")
        for k, v in file_cfg.items():
            key = k.replace("-", "_")
            if key == "stage":
                continue
            if key not in opts:
                raise UsageError(f"unknown option {k!r} in {cfg_path} for stage {stage}")
            merged[key] = v
    merged.update(cli)
    for name, o in opts.items():
        v = merged[name]
        if v is None:
            continue
        try:
            merged[name] = o.type(v)
        except (TypeError, ValueError):
            raise UsageError(f"--{name.replace('_', '-')}: invalid value {v!r}") from None
        if o.choices and merged[name] not in o.choices:
            raise UsageError(f"--{name.replace('_', '-')}: choose from {', '.join(o.choices)}")
    return merged


def _resolve_input(p: str) -> Path:
    path = Path(p)
    if path.is_absolute() or path.exists():
        return path
    return data_root() / path


def resolve_paths(stage: str, cfg: dict[str, Any]) -> dict[str, Any]:
    """Existing-input checks happen here, before any output is created."""
    out = dict(cfg)
    for o in STAGES[stage][1]:
        v = cfg.get(o.name)
        if o.role == "in" and v is not None:
            path = _resolve_input(v)
            if not path.is_file():
                raise UsageError(f"--{o.name.replace('_', '-')}: file not found: {v}")
            out[o.name] = str(path)
        elif o.role == "out":
            out[o.name] = str(Path(v) if v is not None else data_root())
    return out


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


def validate(stage: str, cfg: dict[str, Any]) -> None:
    for key in ("epochs", "batch_size", "n_utts", "order", "beam", "halve_every"):
        if key in cfg and cfg[key] is not None:
            _require(cfg[key] >= 1, f"--{key.replace('_', '-')} must be >= 1")
    for key in ("lr", "peak_lr"):
        if key in cfg:
            _require(cfg[key] > 0, f"--{key.replace('_', '-')} must be positive")
    if stage == "synth-corpus":
        _require(cfg["n_utts"] >= 3, "--n-utts must be >= 3 (one utterance per split)")
    elif stage == "asr-train":
        from .asr import get_preset

        try:
            preset = get_preset(cfg["preset"])
        except ValueError as e:
            raise UsageError(str(e)) from None
        _require(preset.features != "srl" or cfg["srl"] is not None, f"preset {cfg['preset']} needs --srl")
        _require(not preset.pretrained_backbone or cfg["backbone"] is not None,
                 f"preset {cfg['preset']} needs --backbone")
    elif stage == "decode":
        _require(cfg["model"] is not None, "decode needs --model")
        if cfg["vocab"] is None:
            guess = Path(cfg["model"]).with_name("vocab.txt")
            _require(guess.is_file(), f"no --vocab given and {guess} does not exist")
            cfg["vocab"] = str(guess)
    elif stage == "evaluate":
        _require(cfg["hyp"] is not None, "evaluate needs --hyp")
    elif stage == "lm-train":
        _require(0 < cfg["discount"] < 1, "--discount must lie in (0, 1)")


# -- stage runners -----------------------------------------------------------

def _dtype(name: str):
    import torch

    return {"float32": torch.float32, "float64": torch.float64}[name]


def _backbone_config(cfg):
    from .asr.model import BackboneConfig, small_backbone_config

    over = {k: cfg[k] for k in ("branch_channels", "stride_channels", "lstm_layers", "lstm_hidden") if cfg[k] is not None}
    return small_backbone_config(**over) if cfg["backbone_size"] == "small" else BackboneConfig(**over)


def _save_history(out: Path, history, x: str, ys: list[str], title: str) -> None:
    from .report import plot_curves

    history.to_tsv(out / "history.tsv")
    plot_curves(out / "loss.png", history.rows, x, ys, title=title)


def run_synth(cfg, out: Path) -> None:
    from .synth import synth_corpus

    splits = synth_corpus(out, cfg["n_utts"], cfg["seed"], cfg["n_unlabeled"])
    for name, utts in splits.items():
        log.info("%s: %d utterances", name, len(utts))


def run_vocab(cfg, out: Path) -> None:
    from collections import Counter

    from .corpus import read_manifest
    from .report import write_tsv
    from .vocab import build_vocab, encode_text

    utts = read_manifest(cfg["manifest"], require_text=True)
    vocab = build_vocab(u.transcript for u in utts)
    vocab.save(out / "vocab.txt")
    counts = Counter(t for u in utts for t in encode_text(u.transcript, vocab))
    write_tsv(out / "vocab.tsv", [dict(index=i, symbol=s, count=counts.get(i, 0)) for i, s in enumerate(vocab.symbols)])
    log.info("vocabulary of %d symbols (sha256 %s)", len(vocab), vocab.digest()[:12])


def run_srl(cfg, out: Path) -> None:
    from .corpus import read_manifest
    from .nn import LRSchedule
    from .srl import SRLConfig, small_srl_config, train_srl

    keys = ("enc_channels", "ctx_channels", "enc_kernels", "enc_strides", "ctx_kernels", "steps", "negatives", "chunk_seconds")
    over = {k: cfg[k] for k in keys if cfg[k] is not None}
    config = small_srl_config(**over) if cfg["size"] == "small" else SRLConfig(**over)

    def schedule(total):
        return LRSchedule(kind="cosine", peak_lr=cfg["peak_lr"], min_lr=cfg["min_lr"], warmup_iters=cfg["warmup_iters"],
                          warmup_start_lr=cfg["warmup_start_lr"], total_iters=max(total, cfg["warmup_iters"]))

    utts = read_manifest(cfg["manifest"])
    _, history = train_srl(utts, config, schedule, cfg["epochs"], out / "srl.ckpt", batch_size=cfg["batch_size"],
                           seed=cfg["seed"], dtype=_dtype(cfg["dtype"]), max_grad_norm=cfg["max_grad_norm"])
    _save_history(out, history, "iteration", ["loss"], "contrastive loss")


def frontend_table(utts, srl=None, n_mels: int = 40, dtype=None) -> dict[str, np.ndarray]:
    """Per-utterance (T, D) features from a frozen SRL or from log filterbanks."""
    import torch

    from .corpus import compute_fbank, load_waveform

    table = {}
    for u in utts:
        wave = load_waveform(u.audio_path)
        if srl is None:
            table[u.id] = compute_fbank(wave, n_mels).frames
        else:
            with torch.no_grad():
                x = torch.as_tensor(wave.samples, dtype=srl.dtype)[None]
                table[u.id] = srl(x)[1][0].double().numpy()
    return table


def run_pretrain(cfg, out: Path) -> None:
    import torch

    from .asr.model import Backbone, ReconstructionHead
    from .corpus import read_manifest
    from .nn import halving_schedule
    from .pretrain import pretrain_backbone
    from .srl import load_srl

    dtype = _dtype(cfg["dtype"])
    utts = read_manifest(cfg["manifest"])
    srl = load_srl(cfg["srl"], dtype=dtype) if cfg["srl"] else None
    feats = frontend_table(utts, srl, cfg["n_mels"])
    in_dim = next(iter(feats.values())).shape[1]
    torch.manual_seed(cfg["seed"])
    bcfg = _backbone_config(cfg)
    backbone = Backbone(in_dim, bcfg, dtype=dtype)
    head = ReconstructionHead(bcfg.out_dim, in_dim, dtype=dtype)
    history = pretrain_backbone(utts, feats, backbone, head, cfg["epochs"], out / "backbone.ckpt",
                                schedule=halving_schedule(cfg["lr"], cfg["halve_every"]),
                                batch_size=cfg["batch_size"], seed=cfg["seed"], max_grad_norm=cfg["max_grad_norm"])
    _save_history(out, history, "epoch", ["loss"], "masked L1 reconstruction loss")


def run_asr(cfg, out: Path) -> None:
    from .asr import ASRTrainConfig, FbankConfig, get_preset, train_asr
    from .corpus import read_manifest
    from .pretrain import load_backbone
    from .srl import load_srl
    from .vocab import Vocabulary, build_vocab

    dtype = _dtype(cfg["dtype"])
    train = read_manifest(cfg["train"], require_text=True)
    dev = read_manifest(cfg["dev"], require_text=True)
    vocab = Vocabulary.load(cfg["vocab"]) if cfg["vocab"] else build_vocab(u.transcript for u in train)
    vocab.save(out / "vocab.txt")
    preset = get_preset(cfg["preset"])
    srl = load_srl(cfg["srl"], dtype=dtype) if preset.features == "srl" else None
    backbone = load_backbone(cfg["backbone"], dtype=dtype) if preset.pretrained_backbone else None
    bcfg = backbone.config if backbone is not None else _backbone_config(cfg)
    config = ASRTrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], halve_every=cfg["halve_every"],
        warmup_iters=cfg["warmup_iters"], warmup_start_lr=cfg["warmup_start_lr"],
        patience=cfg["patience"] or None, seed=cfg["seed"], max_grad_norm=cfg["max_grad_norm"],
        srl_lr_scale=cfg["srl_lr_scale"], train_ler_every=cfg["train_ler_every"],
        target_val_loss=cfg["target_val_loss"],
        fbank=FbankConfig(n_mels=cfg["n_mels"]),
    )
    _, history = train_asr(train, dev, vocab, cfg["preset"], out / "model.ckpt", bcfg, config,
                           srl=srl, backbone_init=backbone, dtype=dtype)
    ys = ["train_loss", "val_loss"] + (["train_ler"] if cfg["train_ler_every"] else [])
    _save_history(out, history, "epoch", ys, f"preset {cfg['preset'].upper()}")


def run_lm(cfg, out: Path) -> None:
    from .corpus import read_manifest
    from .decode import train_char_lm
    from .metrics import classify_language
    from .report import write_tsv

    utts = read_manifest(cfg["manifest"], require_text=True)
    texts = [u.transcript for u in utts]
    if cfg["language"] != "all":
        texts = [t for t in texts if classify_language(t) == cfg["language"]]
        if not texts:
            raise ValueError(f"no {cfg['language']} transcripts in {cfg['manifest']}")
    lm = train_char_lm(texts, cfg["order"], cfg["discount"])
    lm.save_arpa(out / "lm.arpa")
    sizes = [sum(1 for k in lm.prob if len(k) == n) for n in range(1, lm.order + 1)]
    write_tsv(out / "lm.tsv", [dict(order=n + 1, ngrams=c) for n, c in enumerate(sizes)])
    log.info("LM on %d transcripts, n-gram counts %s", len(texts), sizes)


def run_decode(cfg, out: Path) -> None:
    from .asr import load_asr
    from .asr.ctc import greedy_decode
    from .asr.train import BatchBuilder, logprobs_for
    from .corpus import read_manifest
    from .decode import CharNGramLM, beam_decode
    from .metrics import classify_language
    from .vocab import Vocabulary

    model, meta = load_asr(cfg["model"])
    vocab = Vocabulary.load(cfg["vocab"])
    if vocab.digest() != meta.get("vocab_sha256", vocab.digest()):
        raise ValueError(f"vocabulary {cfg['vocab']} does not match the one the model was trained with")
    model.eval()
    lms = {k: CharNGramLM.load_arpa(cfg[k]) for k in ("lm", "lm_zh", "lm_en") if cfg[k]}
    builder = BatchBuilder(model, trainable_frontend=False)
    utts = read_manifest(cfg["manifest"])
    rows = []
    for u in utts:
        lp = logprobs_for(model, builder, [u])[0]
        greedy = greedy_decode(lp, vocab)
        lang = classify_language(greedy)
        lm_key = {"zh": "lm_zh", "en": "lm_en"}.get(lang)
        lm_key = lm_key if lm_key in lms else ("lm" if "lm" in lms else None)
        if cfg["greedy"]:
            hyp, lm_key = greedy, None
        else:
            hyp = beam_decode(lp, vocab, lms.get(lm_key), cfg["alpha"], cfg["beta"], cfg["beam"])[0].text
        rows.append(dict(id=u.id, hyp=hyp, greedy=greedy, language=classify_language(hyp), lm=lm_key or ""))
    with (out / "hyps.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
    log.info("decoded %d utterances", len(rows))


def _read_hyps(path: str, field: str) -> dict[str, str]:
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                text = d.get(field, d.get("text"))
                hyps[str(d["id"])] = "" if text is None else str(text)
            except (json.JSONDecodeError, KeyError, AttributeError) as e:
                raise ValueError(f"{path}:{lineno}: bad hypothesis line ({e})") from None
    return hyps


def evaluate_pairs(refs, hyps: dict[str, str]) -> tuple[dict, list[dict]]:
    """Corpus report plus per-utterance rows for references ``refs`` (utterances) and ``hyps`` by id."""
    from .metrics import classify_language, edit_distance_ops, ler_counts, tokenize_for_ler

    missing = [u.id for u in refs if u.id not in hyps]
    if missing:
        raise ValueError(f"{len(missing)} reference utterances have no hypothesis (first: {missing[0]})")
    rows, by_lang = [], {}
    correct_lang = scored = 0
    for u in refs:
        hyp = hyps[u.id]
        ref_tokens = tokenize_for_ler(u.transcript)
        ref_lang = u.language if u.language in ("zh", "en", "mixed") else classify_language(u.transcript)
        hyp_lang = classify_language(hyp) if hyp.strip() else "mixed"
        row = dict(id=u.id, ref=u.transcript, hyp=hyp, ref_language=ref_lang, hyp_language=hyp_lang)
        if ref_tokens:
            ops = edit_distance_ops(ref_tokens, tokenize_for_ler(hyp))
            row.update(ref_tokens=len(ref_tokens), insertions=ops.insertions, deletions=ops.deletions, substitutions=ops.substitutions,
                       ler=ops.total / len(ref_tokens))
            by_lang.setdefault(ref_lang, []).append((u.transcript, hyp))
            correct_lang += hyp_lang == ref_lang
            scored += 1
        rows.append(row)
    overall = ler_counts((u.transcript, hyps[u.id]) for u in refs)
    report = dict(
        ler=overall.ler,
        per_language_ler={k: ler_counts(v).ler for k, v in sorted(by_lang.items())},
        language_accuracy=correct_lang / scored if scored else 0.0,
        utterance_count=scored,
        excluded_count=overall.excluded,
    )
    return report, rows


def run_evaluate(cfg, out: Path) -> None:
    from .corpus import read_manifest
    from .report import plot_ler_summary, write_json, write_tsv

    refs = read_manifest(cfg["ref"], require_text=True)
    report, rows = evaluate_pairs(refs, _read_hyps(cfg["hyp"], cfg["field"]))
    if report["excluded_count"]:
        log.warning("%d utterances with empty references excluded", report["excluded_count"])
    write_json(out / "report.json", report)
    cols = ["id", "ref_language", "hyp_language", "ref_tokens", "insertions", "deletions", "substitutions", "ler", "ref", "hyp"]
    write_tsv(out / "per_utterance.tsv", rows, cols)
    plot_ler_summary(out / "ler.png", report["ler"], report["per_language_ler"],
                     [r["ler"] for r in rows if "ler" in r])
    log.info("LER %.4f over %d utterances", report["ler"], report["utterance_count"])


RUNNERS = {
    "synth-corpus": run_synth,
    "vocab-build": run_vocab,
    "srl-train": run_srl,
    "pretrain": run_pretrain,
    "asr-train": run_asr,
    "lm-train": run_lm,
    "decode": run_decode,
    "evaluate": run_evaluate,
}


def run_command(argv: list[str] | None = None) -> int:
    from .srl import DivergenceError
    from .report import write_json

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = vars(build_parser().parse_args(argv))
        stage = args.pop("stage", None)
        if stage is None:
            raise UsageError("missing stage; choose from " + ", ".join(STAGES))
        quiet = args.pop("quiet", False)
        cfg = resolve_paths(stage, resolve_config(stage, args))
        validate(stage, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", dict(stage=stage, version=__version__, cwd=os.getcwd(),
                                                data_root=str(data_root()), config=cfg))
        t0 = time.time()
        RUNNERS[stage](cfg, out)
        log.info("%s finished in %.1f s", stage, time.time() - t0)
    except DivergenceError as e:
        log.error("training diverged: %s", e)
        return EXIT_DIVERGED
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        log.error("%s failed: %s: %s", stage, type(e).__name__, e)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
