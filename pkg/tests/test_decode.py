import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atcasr.asr.ctc import collapse
from atcasr.decode import BOS, EOS, UNK_TOKEN, CharNGramLM, beam_decode, lm_logprob, train_char_lm
from atcasr.vocab import build_vocab

TEXTS = ["上升 ABC", "AB CD", "上升上", "DCBA AB", "A'B"]


def best_labeling(lp: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Exhaustive search: sum path probabilities per collapsed labeling, return the argmax."""
    T, V = lp.shape
    mass: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(V), repeat=T):
        lab = tuple(collapse(path, blank=0))
        mass[lab] = np.logaddexp(mass.get(lab, -np.inf), sum(lp[t, s] for t, s in enumerate(path)))
    return max(mass.items(), key=lambda kv: kv[1])


def random_lp(rng, T, V):
    x = rng.standard_normal((T, V)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


# -- language model ---------------------------------------------------------------------

def _contexts(lm):
    yield []
    for k in lm.prob:
        if len(k) < lm.order and k[-1] != EOS:
            yield list(k)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_conditionals_sum_to_one(order):
    lm = train_char_lm(TEXTS, order=order)
    for h in _contexts(lm):
        total = sum(math.exp(lm.cond_logprob(w, h)) for w in lm.symbols)
        assert abs(total - 1.0) < 1e-9, h


def test_bigram_on_repeated_char():
    lm = train_char_lm(["aa"], order=2)
    p_aa = lm.cond_logprob("A", ["A"])
    assert p_aa > lm.cond_logprob(UNK_TOKEN, ["A"])
    assert p_aa > lm.cond_logprob(EOS, ["A"])  # same bigram count, larger lower-order mass


def test_unigram_symmetry():
    lm = train_char_lm(["ab"], order=1)
    assert lm.cond_logprob("A", []) == lm.cond_logprob("B", [])


def test_unseen_character_gets_floor():
    lm = train_char_lm(["ab"], order=3)
    floor = lm.prob[(UNK_TOKEN,)]
    assert math.isfinite(floor)
    assert lm.cond_logprob("Z", []) == floor
    assert math.isfinite(lm_logprob(lm, "ZZZ"))


def test_lm_logprob_examples():
    lm = train_char_lm(TEXTS, order=4)
    assert lm_logprob(lm, "") == 0.0
    assert lm_logprob(lm, "A") == lm.cond_logprob("A", [BOS])
    assert lm_logprob(lm, "AB") == pytest.approx(lm.cond_logprob("A", [BOS]) + lm.cond_logprob("B", [BOS, "A"]))


def test_training_errors():
    with pytest.raises(ValueError):
        train_char_lm([])
    with pytest.raises(ValueError):
        train_char_lm(["a"], order=0)


def test_arpa_round_trip(tmp_path):
    lm = train_char_lm(TEXTS, order=3)
    lm.save_arpa(tmp_path / "lm.arpa")
    text = (tmp_path / "lm.arpa").read_text(encoding="utf-8")
    assert text.startswith("\\data\\") and "<sp>" in text and text.rstrip().endswith("\\end\\")
    again = CharNGramLM.load_arpa(tmp_path / "lm.arpa")
    assert again.order == 3
    for s in ["上升 ABC", "CD", "ZZ", "A B"]:
        assert lm_logprob(again, s) == pytest.approx(lm_logprob(lm, s), rel=1e-9)


def test_arpa_rejects_garbage(tmp_path):
    (tmp_path / "x.arpa").write_text("nothing here\n")
    with pytest.raises(Exception):
        CharNGramLM.load_arpa(tmp_path / "x.arpa")


# -- beam search ------------------------------------------------------------------------------

VOCAB = build_vocab(["AB"])  # blank, space, unk, apostrophe, A, B


def test_empty_matrix_gives_empty_hypothesis():
    (h,) = beam_decode(np.zeros((0, len(VOCAB))), VOCAB, None, 0, 0)
    assert h.text == "" and h.tokens == ()


def test_single_frame():
    lp = np.log(np.full((1, len(VOCAB)), 0.05))
    lp[0, VOCAB.index("B")] = np.log(0.75)
    assert beam_decode(lp, VOCAB, None, 0, 0, beam=4)[0].text == "B"
    lp = np.log(np.full((1, len(VOCAB)), 0.05))
    lp[0, VOCAB.blank] = np.log(0.75)
    assert beam_decode(lp, VOCAB, None, 0, 0, beam=4)[0].text == ""


def test_argument_validation():
    with pytest.raises(ValueError):
        beam_decode(np.zeros((2, len(VOCAB))), VOCAB, beam=2, nbest=3)
    with pytest.raises(ValueError):
        beam_decode(np.zeros((2, 3)), VOCAB)


def _small_vocab_lp(rng, T, V):
    """Random rows over the first ``V`` symbols (blank first); the rest get zero probability."""
    lp = np.full((T, len(VOCAB)), -np.inf)
    cols = [VOCAB.blank] + [VOCAB.index(c) for c in "AB"][: V - 1]
    lp[:, cols] = random_lp(rng, T, len(cols))
    return lp, cols


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(2, 3), st.integers(0, 100_000))
def test_beam_matches_exhaustive_best_labeling(T, V, seed):
    lp, cols = _small_vocab_lp(np.random.default_rng(seed), T, V)
    dense = lp[:, cols]
    want, logp = best_labeling(dense)
    top = beam_decode(lp, VOCAB, None, alpha=0, beta=0, beam=64)[0]
    assert tuple(cols.index(t) for t in top.tokens) == want
    assert top.score == pytest.approx(logp, abs=1e-9)


def test_three_frame_three_symbol_case():
    rng = np.random.default_rng(7)
    for _ in range(20):
        lp, cols = _small_vocab_lp(rng, 3, 3)
        want, _ = best_labeling(lp[:, cols])
        top = beam_decode(lp, VOCAB, None, 0, 0, beam=64)[0]
        assert tuple(cols.index(t) for t in top.tokens) == want


def test_prefix_mass_bounded_by_path_mass():
    rng = np.random.default_rng(1)
    for _ in range(20):
        lp, cols = _small_vocab_lp(rng, 4, 3)
        for h in beam_decode(lp, VOCAB, None, 0, 0, beam=64, nbest=10):
            assert h.log_acoustic <= 1e-12


def test_lm_breaks_acoustic_tie():
    vocab = build_vocab(["ABC"])
    a, b, c = (vocab.index(x) for x in "ABC")
    lp = np.full((2, len(vocab)), -30.0)
    lp[0, a] = 0.0
    lp[1, b] = lp[1, c] = math.log(0.5)
    lm = train_char_lm(["AB"] * 20 + ["C"], order=2)
    top = beam_decode(lp, vocab, lm, alpha=1.25, beta=0.0, beam=8, nbest=2)
    assert [h.text for h in top] == ["AB", "AC"]


def test_score_is_exactly_additive():
    vocab = build_vocab(TEXTS)
    lm = train_char_lm(TEXTS, order=4)
    lp = random_lp(np.random.default_rng(2), 6, len(vocab))
    for h in beam_decode(lp, vocab, lm, alpha=1.25, beta=1.5, beam=16, nbest=16):
        assert h.score == pytest.approx(h.log_acoustic + 1.25 * h.log_lm + 1.5 * h.words, abs=1e-9)
        assert h.log_lm == pytest.approx(lm_logprob(lm, h.text), abs=1e-9)
