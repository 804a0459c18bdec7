"""Acceptance criteria 1-12. Each test records one PASS/FAIL line (printed in the run summary).

The slow tests share one synthetic corpus, one representation model and
one pretrained backbone, built once per session.
"""

import math
import statistics
import time

import numpy as np
import pytest
import torch

from atcasr.asr import ASRTrainConfig, Backbone, ReconstructionHead, collapse, ctc_loss, small_backbone_config, train_asr
from atcasr.asr.ctc import greedy_decode
from atcasr.asr.train import BatchBuilder, load_asr, logprobs_for
from atcasr.corpus import FeatureCache
from atcasr.decode import beam_decode, train_char_lm
from atcasr.metrics import ler
from atcasr.nn import LRSchedule, ParameterStore, grad_check, halving_schedule, lr_at, srl_schedule
from atcasr.pretrain import apply_mask, masked_l1_loss, pretrain_backbone, reconstruct, select_mask
from atcasr.srl import SRLModel, contrastive_loss, sample_negatives, small_srl_config, train_srl
from atcasr.synth import synth_corpus
from atcasr.vocab import build_vocab

from conftest import record
from test_ctc import brute_force_nll, random_instance
from test_decode import best_labeling

# Desk-scale training settings shared by the slow criteria.
N_UNLABELED = 400
SRL_CFG = dict(enc_channels=64, ctx_channels=64, steps=3, chunk_seconds=2.0)
SRL_EPOCHS = 60
PRETRAIN_EPOCHS = 20
VAL_THRESHOLD = 1.0      # criterion 8: mean dev CTC loss per utterance, fixed before any run


def asr_config(**kw) -> ASRTrainConfig:
    base = dict(epochs=200, batch_size=4, lr=3e-3, halve_every=1000, warmup_iters=10, warmup_start_lr=3e-4,
                patience=None, srl_lr_scale=0.01)
    base.update(kw)
    return ASRTrainConfig(**base)


# -- fast criteria -------------------------------------------------------------------------

def test_criterion_01_ctc_matches_enumeration():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    ok = True
    for _ in range(200):
        lp, label = random_instance(rng, max_T=6, max_V=4, max_L=3)
        got = ctc_loss(torch.as_tensor(lp, dtype=torch.float64), label).item()
        want = brute_force_nll(lp, label)
        if math.isinf(want) or math.isinf(got):
            ok &= math.isinf(want) and math.isinf(got)
        else:
            worst = max(worst, abs(got - want))
    dt = time.time() - t0
    ok = ok and worst < 1e-9 and dt < 5
    record(1, ok, f"200 instances, max |forward - enumeration| = {worst:.2e}, {dt:.2f} s")
    assert ok


def test_criterion_02_gradient_checks():
    t0 = time.time()
    torch.manual_seed(0)
    errs = {}

    srl = SRLModel(small_srl_config(enc_channels=8, ctx_channels=8, ctx_kernels=(3,), steps=2, negatives=3),
                   dtype=torch.float64)
    x = torch.randn(1, 1200, dtype=torch.float64) * 0.3
    neg = sample_negatives(srl.config.output_length(1200), 2, 3, np.random.default_rng(0))

    def contrastive(_):
        z, c = srl(x)
        return contrastive_loss(z[0], c[0], srl.discriminators, None, 3, neg_idx=neg)

    p_srl = ParameterStore.of(srl)
    errs["contrastive"] = (grad_check(contrastive, p_srl, probe_count=40, h=1e-5), p_srl.numel())

    cfg = small_backbone_config(branch_channels=4, stride_channels=8, lstm_hidden=6)
    bb = Backbone(4, cfg, dtype=torch.float64)
    head = ReconstructionHead(cfg.out_dim, 4, dtype=torch.float64)
    rng = np.random.default_rng(0)
    F = torch.as_tensor(rng.standard_normal((1, 8, 4)))
    spec = select_mask(8, rng, prob=0.5)
    Fc = torch.as_tensor(apply_mask(F[0].numpy(), spec, rng))[None]
    mask = torch.as_tensor(spec.mask)[None]
    p_rec = ParameterStore.of(bb, "backbone.")
    for n, p in head.named_parameters():
        p_rec.add("head." + n, p)
    errs["masked L1"] = (grad_check(lambda _: masked_l1_loss(F, reconstruct(Fc, bb, head), mask), p_rec,
                                    probe_count=40, h=1e-5), p_rec.numel())

    logits = torch.randn(6, 5, dtype=torch.float64, requires_grad=True)
    p_ctc = ParameterStore({"logits": logits})
    errs["CTC"] = (grad_check(lambda p: ctc_loss(torch.log_softmax(p["logits"], -1), [1, 3, 3]), p_ctc,
                              probe_count=30, h=1e-5), p_ctc.numel())

    dt = time.time() - t0
    ok = all(e < 1e-4 and n <= 10_000 for e, n in errs.values()) and dt < 120
    detail = ", ".join(f"{k} {e:.1e} ({n} params)" for k, (e, n) in errs.items())
    record(2, ok, f"max relative error: {detail}; {dt:.1f} s")
    assert ok


def test_criterion_03_collapse():
    got = (collapse("a_bb__c"), collapse("_a_b_c_"))
    ok = got == ("abc", "abc")
    record(3, ok, f"'a_bb__c' -> {got[0]!r}, '_a_b_c_' -> {got[1]!r}")
    assert ok


def test_criterion_04_masking_statistics():
    rng = np.random.default_rng(7)
    frac = select_mask(100_000, rng).mask.mean()
    actions = []
    while len(actions) < 10_000:
        s = select_mask(10_000, rng)
        actions.extend(s.action[s.mask == 1].tolist())
    a = np.array(actions[:10_000])
    split = tuple(float(np.mean(a == k)) for k in (0, 1, 2))
    ok = 0.1455 <= frac <= 0.1545 and all(abs(s - e) <= 0.02 for s, e in zip(split, (0.1, 0.1, 0.8)))
    record(4, ok, f"selected {frac:.4f}; zero/noise/smooth = {split[0]:.3f}/{split[1]:.3f}/{split[2]:.3f}")
    assert ok


def test_criterion_05_zero_logit_closed_form():
    worst = 0.0
    for T, k, lam in [(5, 1, 1), (9, 3, 10), (20, 12, 4), (50, 12, 10)]:
        z = torch.randn(T, 6, dtype=torch.float64)
        c = torch.randn(T, 6, dtype=torch.float64)
        hs = [torch.nn.Linear(6, 6).double() for _ in range(k)]
        for h in hs:
            torch.nn.init.zeros_(h.weight)
            torch.nn.init.zeros_(h.bias)
        got = contrastive_loss(z, c, hs, np.random.default_rng(0), negatives=lam).item()
        want = sum((T - s) * (1 + lam) * math.log(2) for s in range(1, k + 1))
        worst = max(worst, abs(got - want))
    ok = worst < 1e-9
    record(5, ok, f"max |loss - closed form| = {worst:.1e}")
    assert ok


def test_criterion_06_schedule_endpoints():
    total = 10_000
    sch = srl_schedule(total)
    got = (lr_at(sch, 0), lr_at(sch, 500), lr_at(sch, total - 1))
    step = halving_schedule(1e-4, 25)
    half = lr_at(step, 0, epoch=25)
    ok = got == (1e-7, 1e-3, 1e-9) and half == 5e-5
    record(6, ok, f"cosine {got[0]:g} @0, {got[1]:g} @500, {got[2]:g} @final; step {half:g} @epoch 25")
    assert ok


def test_criterion_10_beam_exactness():
    vocab = build_vocab(["AB"])
    cols_all = [vocab.blank, vocab.index("A"), vocab.index("B")]
    rng = np.random.default_rng(10)
    checked = mismatches = 0
    for T in range(1, 5):
        for V in (2, 3):
            cols = cols_all[:V]
            for _ in range(60):
                x = rng.standard_normal((T, V)) * 2
                dense = x - np.logaddexp.reduce(x, axis=1, keepdims=True)
                lp = np.full((T, len(vocab)), -np.inf)
                lp[:, cols] = dense
                want, _ = best_labeling(dense)
                top = beam_decode(lp, vocab, None, alpha=0.0, beta=0.0, beam=64)[0]
                mismatches += tuple(cols.index(t) for t in top.tokens) != want
                checked += 1
    ok = mismatches == 0
    record(10, ok, f"{checked} instances (T' <= 4, |V| <= 3), {mismatches} mismatches")
    assert ok


def test_criterion_12_causality():
    torch.manual_seed(12)
    srl = SRLModel(small_srl_config(enc_channels=16, ctx_channels=16, ctx_kernels=(3, 3, 3)), dtype=torch.float64)
    z = torch.randn(1, 24, 16, dtype=torch.float64)
    c = srl.contextualize(z)
    violations = 0
    for t in range(z.shape[1]):
        z2 = z.clone()
        z2[0, t] += torch.randn(16, dtype=torch.float64) * 3
        violations += not torch.equal(c[0, :t], srl.contextualize(z2)[0, :t])
    ok = violations == 0
    record(12, ok, f"perturbed each of {z.shape[1]} frames; {violations} earlier outputs changed")
    assert ok


# -- shared training fixtures -------------------------------------------------------------------

@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("acceptance")
    splits = synth_corpus(root / "data", 30, seed=0, n_unlabeled=N_UNLABELED)
    vocab = build_vocab(u.transcript for u in splits["train"])
    cache = FeatureCache()

    unl = splits["unlabeled"]
    waves = [cache.wave(u) for u in unl]
    cfg = small_srl_config(**SRL_CFG)

    def sched(total):
        return LRSchedule(kind="cosine", peak_lr=3e-3, min_lr=1e-5, warmup_iters=20, warmup_start_lr=1e-5,
                          total_iters=total)

    t0 = time.time()
    srl, _ = train_srl(unl, cfg, sched, SRL_EPOCHS, root / "srl.ckpt", batch_size=8, seed=0, waves=waves)
    with torch.no_grad():
        feats = {u.id: srl(torch.as_tensor(w.samples, dtype=torch.float32)[None])[1][0].double().numpy()
                 for u, w in zip(unl, waves)}
    torch.manual_seed(0)
    bcfg = small_backbone_config()
    bb = Backbone(srl.config.dim, bcfg)
    head = ReconstructionHead(bcfg.out_dim, srl.config.dim)
    pretrain_backbone(unl, feats, bb, head, PRETRAIN_EPOCHS, root / "backbone.ckpt",
                      schedule=halving_schedule(3e-3, 25), batch_size=16, seed=0)
    print(f"shared SRL + pretraining built in {time.time() - t0:.0f} s")
    yield dict(root=root, splits=splits, vocab=vocab, srl_path=root / "srl.ckpt", backbone=bb)
    torch.set_num_threads(threads)


def _srl(p):
    from atcasr.srl import load_srl

    return load_srl(p["srl_path"])


@pytest.fixture(scope="session")
def c3_run(pipeline):
    p = pipeline
    t0 = time.time()
    model, hist = train_asr(p["splits"]["train"], p["splits"]["dev"], p["vocab"], "C3", p["root"] / "c3.ckpt",
                            small_backbone_config(), asr_config(epochs=200, train_ler_every=1),
                            srl=_srl(p), backbone_init=p["backbone"])
    return model, hist, time.time() - t0


# -- slow criteria --------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_c3_overfits_training_set(c3_run):
    _, hist, dt = c3_run
    lers = hist.column("train_ler")
    first = next((i + 1 for i, v in enumerate(lers) if v == 0.0), None)
    ok = first is not None and first <= 200 and dt < 15 * 60
    record(7, ok, f"C3 training LER first 0% at epoch {first} (min {min(lers):.3f}); {dt:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_08_pretraining_speeds_convergence(pipeline):
    p = pipeline
    epochs = {}
    for preset in ("A3", "B3", "C3"):
        epochs[preset] = []
        for seed in (0, 1, 2):
            _, hist = train_asr(p["splits"]["train"], p["splits"]["dev"], p["vocab"], preset,
                                p["root"] / f"{preset}_{seed}.ckpt", small_backbone_config(),
                                asr_config(epochs=150, seed=seed, target_val_loss=VAL_THRESHOLD),
                                srl=_srl(p) if preset != "A3" else None,
                                backbone_init=p["backbone"] if preset == "C3" else None, cache=FeatureCache())
            val = hist.column("val_loss")
            epochs[preset].append(next((i + 1 for i, v in enumerate(val) if v <= VAL_THRESHOLD), math.inf))
    med = {k: statistics.median(v) for k, v in epochs.items()}
    ok = med["C3"] < med["B3"] < med["A3"]
    detail = "; ".join(f"{k} {v} (median {med[k]})" for k, v in epochs.items())
    record(8, ok, f"epochs to dev CTC <= {VAL_THRESHOLD}: {detail}")
    assert ok


@pytest.mark.slow
def test_criterion_09_lm_beam_not_worse_than_greedy(pipeline, c3_run):
    p = pipeline
    model, _, _ = c3_run
    vocab = p["vocab"]
    lm = train_char_lm([u.transcript for u in p["splits"]["train"]], order=4)
    test = p["splits"]["test"]
    builder = BatchBuilder(model, trainable_frontend=False, cache=FeatureCache())
    lps = logprobs_for(model, builder, test)
    greedy = [(u.transcript, greedy_decode(lp, vocab)) for u, lp in zip(test, lps)]
    beam = [(u.transcript, beam_decode(lp, vocab, lm, alpha=1.25, beta=1.5, beam=64)[0].text)
            for u, lp in zip(test, lps)]
    g, b = ler(greedy), ler(beam)
    ok = b <= g
    record(9, ok, f"test LER greedy {g:.3f}, LM beam {b:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_11_checkpoint_forward_identical(pipeline, c3_run):
    p = pipeline
    model, _, _ = c3_run
    loaded, _ = load_asr(p["root"] / "c3.ckpt")
    utts = p["splits"]["test"] + p["splits"]["dev"]
    a = logprobs_for(model, BatchBuilder(model, False, FeatureCache()), utts)
    b = logprobs_for(loaded, BatchBuilder(loaded, False, FeatureCache()), utts)
    same = sum(torch.equal(x, y) for x, y in zip(a, b))
    ok = same == len(utts)
    record(11, ok, f"{same}/{len(utts)} utterances bit-identical after save/load")
    assert ok
