import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tda_st.data import EOS, SRC_TAG, TGT_TAG, Vocabulary, gen_corpus
from tda_st.metrics import (
    EvalReport,
    agreement_report,
    bleu,
    corpus_wer,
    edit_distance,
    read_report_metrics,
    wer,
    write_report,
)

from stubs import ContextBlindModel

BLEU_EXAMPLE = 45.18010018049223  # 100 * (3/4 * 1/3 * 1/3 * 1/2) ** 0.25

words = st.sampled_from(["a", "b", "c", "d"])
short_line = st.lists(words, min_size=1, max_size=4).map(" ".join)


# ---------------------------------------------------------------------------
# WER


def test_wer_examples():
    assert wer("a b c d".split(), "a b c d".split()) == 0.0
    assert wer("a b c d".split(), "a x c".split()) == pytest.approx(0.5, abs=1e-12)
    assert wer("a b c".split(), []) == 1.0
    assert corpus_wer(["a b c d", "e f"], ["a x c", "e f"]) == pytest.approx(2 / 6)
    with pytest.raises(ValueError):
        wer([], ["a"])
    with pytest.raises(ValueError):
        corpus_wer(["a"], ["a", "b"])


@settings(max_examples=200, deadline=None)
@given(st.lists(words, max_size=7), st.lists(words, max_size=7))
def test_edit_distance_symmetry_and_bounds(a, b):
    d = edit_distance(a, b)
    assert d == edit_distance(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
    assert (d == 0) == (a == b)
    if a:
        assert wer(a, b) * len(a) == pytest.approx(d)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(short_line, short_line), min_size=1, max_size=6), st.randoms())
def test_corpus_metrics_ignore_example_order(pairs, rnd):
    refs, hyps = zip(*pairs)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    r2, h2 = zip(*shuffled)
    assert corpus_wer(refs, hyps) == pytest.approx(corpus_wer(r2, h2), abs=1e-12)
    assert bleu(refs, hyps) == pytest.approx(bleu(r2, h2), abs=1e-9)


# ---------------------------------------------------------------------------
# BLEU


def test_bleu_examples():
    assert bleu(["a b c d"], ["a b x d"]) == pytest.approx(BLEU_EXAMPLE, abs=1e-3)
    refs = ["the cat sat on the mat", "a b c"]
    assert bleu(refs, refs) == 100.0
    assert corpus_wer(refs, refs) == 0.0
    assert bleu(["a b"], ["c d"]) == 0.0
    with pytest.raises(ValueError):
        bleu([], [])


def test_bleu_brevity_penalty():
    # perfect n-gram precision at half the reference length
    ref = "a b c d e f g h"
    hyp = "a b c d"
    assert bleu([ref], [hyp]) == pytest.approx(100.0 * math.exp(1 - 2), rel=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(short_line, short_line), min_size=1, max_size=5))
def test_bleu_bounds_and_perfect_iff_equal(pairs):
    refs, hyps = zip(*pairs)
    score = bleu(refs, hyps)
    assert 0.0 <= score <= 100.0
    # lines of at most four tokens: full precision at every order forces equality
    equal = all(r.split() == h.split() for r, h in pairs)
    assert (score == 100.0) == equal


# ---------------------------------------------------------------------------
# agreement report


@pytest.fixture(scope="module")
def small_set():
    c = gen_corpus(60, seed=11)
    vocab = Vocabulary.build(t for ex in c.all() for t in (ex.transcription, ex.translation))
    return c.train[:20], vocab


def test_agreement_on_context_blind_stub(small_set):
    examples, vocab = small_set
    model = ContextBlindModel(len(vocab), seed=2)
    rep = agreement_report(model, examples, vocab, max_tokens=300)
    assert rep.n_examples == 20
    assert abs(rep.kl_fwd) < 1e-8 and abs(rep.kl_bwd) < 1e-8
    # the log-likelihood gap comes only from the tag and EOS predictions
    for rec, ex in zip(rep.records, sorted(examples, key=lambda e: e.id)):
        z, y = vocab.encode(ex.transcription), vocab.encode(ex.translation)
        after_z = model._dist((SRC_TAG, *z))
        after_y = model._dist((TGT_TAG, *y))
        gap = (after_z[TGT_TAG] + after_y[EOS]) - (after_y[SRC_TAG] + after_z[EOS])
        assert rec.nll_b - rec.nll_a == pytest.approx(gap, abs=1e-6)
        assert rec.n_content == len(z) + len(y)


def test_agreement_report_is_deterministic(small_set, tmp_path):
    examples, vocab = small_set
    model = ContextBlindModel(len(vocab), seed=5)
    a = agreement_report(model, examples, vocab, max_tokens=200)
    b = agreement_report(model, list(reversed(examples)), vocab, max_tokens=500)
    assert a == b
    write_report(tmp_path / "a.txt", a)
    write_report(tmp_path / "b.txt", b)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_agreement_is_positive_for_context_aware_model(small_set):
    from tda_st.nn import ModelConfig, Seq2SeqModel

    examples, vocab = small_set
    cfg = ModelConfig(d_model=16, ffn_dim=32, heads=2, enc_layers=1, dec_layers=1, vocab_size=len(vocab),
                      feat_dim=16, dropout=0.0)
    rep = agreement_report(Seq2SeqModel(cfg, seed=0), examples[:5], vocab)
    assert rep.kl_fwd > 0 and rep.kl_bwd > 0 and rep.nll_gap >= 0


def test_report_round_trip(tmp_path):
    rep = EvalReport(bleu=45.18, wer=0.5, kl_fwd=0.01, kl_bwd=0.02, nll_gap=0.3, n_examples=2,
                     records=[{"id": "u1", "hyp": "A B"}, {"id": "u2", "hyp": "C"}])
    write_report(tmp_path / "r.txt", rep)
    metrics = read_report_metrics(tmp_path / "r.txt")
    assert metrics == {"n_examples": 2.0, "bleu": 45.18, "wer": 0.5, "kl_fwd": 0.01, "kl_bwd": 0.02,
                       "nll_gap": 0.3}
    body = (tmp_path / "r.txt").read_text(encoding="utf-8").split("\n\n", 1)[1].splitlines()
    assert body == ["id\thyp", "u1\tA B", "u2\tC"]


def test_agreement_uses_both_layout_distributions(small_set):
    examples, vocab = small_set
    model = ContextBlindModel(len(vocab), seed=3)
    rep = agreement_report(model, examples[:3], vocab)
    assert all(np.isfinite([r.nll_a, r.nll_b]).all() for r in rep.records)
    assert rep.nll_gap == pytest.approx(np.mean([abs(r.nll_a - r.nll_b) for r in rep.records]))
