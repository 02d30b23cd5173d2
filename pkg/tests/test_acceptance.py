"""End-to-end acceptance checks; each test prints one pass/fail line in the terminal summary."""

import math
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from tda_st import tensor as T
from tda_st.data import EOS, SRC_TAG, TGT_TAG, Vocabulary, collate, gen_corpus
from tda_st.decoding import DecodeRequest, beam_search, decode_full, decode_st
from tda_st.experiment import read_summary, run_sweep
from tda_st.metrics import bleu, corpus_wer, wer
from tda_st.nn import ModelConfig, Seq2SeqModel, preset
from tda_st.objective import content_pairs, score_batch, token_kl
from tda_st.trainer import TrainConfig, load_checkpoint, model_from_checkpoint, read_metric_log, train

from acceptance_log import criterion
from cli_pipeline import run_pipeline, snapshot
from gradcheck import max_gradient_error
from stubs import ContextBlindModel, TableScorer, exhaustive_best
from test_tensor import _graphs, random_graph

GRAD_TOL = 1e-4

# paired experiment: 2000 synthetic triplets, toy model, three seeds, lambda 0 vs 1
SWEEP_SEEDS = (0, 1, 2)
SWEEP_CONFIG = TrainConfig(max_steps=5000, warmup_steps=500, peak_lr=0.002, label_smoothing=0.1, dropout=0.1,
                           checkpoint_every=250, keep_best_k=5, max_tokens=2000)
RUN_BUDGET_SECONDS = 30 * 60
# transcription-only steps per seed; the encoder seeds both arms of that seed
PRETRAIN_STEPS = 1500


def _vocab_for(corpus):
    return Vocabulary.build(t for ex in corpus.all() for t in (ex.transcription, ex.translation))


# ---------------------------------------------------------------------------
# 1. gradients


def _objective_error(model_config, batch, coords_per_tensor=None, seed=0):
    with T.precision("wide"):
        model = Seq2SeqModel(model_config, seed=seed, dtype=np.float64)
        names = sorted(model.params)
        leaves = [model.params[n] for n in names]
        coords = None
        if coords_per_tensor is not None:
            rng = np.random.default_rng(seed)
            coords = [rng.choice(leaf.size, size=min(coords_per_tensor, leaf.size), replace=False).tolist()
                      for leaf in leaves]

        def loss():
            return score_batch(model, batch, lam=1.0, label_smoothing=0.1).total

        return max_gradient_error(loss, leaves, coords), sum(leaf.size for leaf in leaves)


def test_criterion_1_gradients():
    start = time.perf_counter()
    with criterion(1, "autodiff matches central differences (sub-graphs and full objective)") as notes:
        worst_ops = 0.0
        with T.precision("wide"):
            for builder in _graphs():
                for seed in range(3):
                    fn, leaves = builder(np.random.default_rng(seed))
                    worst_ops = max(worst_ops, max_gradient_error(fn, leaves))
            for seed in range(20):
                fn, leaves = random_graph(np.random.default_rng(500 + seed))
                worst_ops = max(worst_ops, max_gradient_error(fn, leaves))
        corpus = gen_corpus(40, seed=3)
        vocab = _vocab_for(corpus)
        batch = collate(sorted(corpus.train, key=lambda e: e.frames)[:2], vocab)
        tiny = ModelConfig(d_model=8, ffn_dim=16, heads=2, enc_layers=1, dec_layers=1, vocab_size=len(vocab),
                           feat_dim=16, dropout=0.0)
        worst_tiny, n_tiny = _objective_error(tiny, batch)
        toy = preset("toy", vocab_size=len(vocab), dropout=0.0)
        worst_toy, _ = _objective_error(toy, batch, coords_per_tensor=3)
        elapsed = time.perf_counter() - start
        notes += [f"sub-graphs {worst_ops:.1e}", f"tiny model all {n_tiny} coords {worst_tiny:.1e}",
                  f"toy model sampled {worst_toy:.1e}", f"{elapsed:.0f}s"]
        assert worst_ops < GRAD_TOL and worst_tiny < GRAD_TOL and worst_toy < GRAD_TOL
        assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. KL math


def _direct_kl(p, q):
    return sum(a * math.log(a / b) for a, b in zip(p, q))


def test_criterion_2_kl_math():
    with criterion(2, "token KL non-negative, zero on identical inputs, hand value") as notes:
        oracle = _direct_kl([0.9, 0.1], [0.6, 0.4])
        assert abs(oracle - 0.22629) < 1e-5
        rng = np.random.default_rng(0)
        worst_neg, worst_self = 0.0, 0.0
        with T.precision("wide"):
            hand = token_kl(np.log([0.9, 0.1]), np.log([0.6, 0.4])).item()
            for _ in range(10_000):
                V = int(rng.integers(2, 40))
                temp = float(rng.choice([0.1, 1.0, 5.0, 20.0]))
                a, b = rng.normal(size=(2, V)) * temp
                p = a - a.max() - np.log(np.exp(a - a.max()).sum())
                q = b - b.max() - np.log(np.exp(b - b.max()).sum())
                worst_neg = min(worst_neg, token_kl(p, q).item())
                worst_self = max(worst_self, abs(token_kl(p, p).item()))
        notes += [f"min KL {worst_neg:.1e}", f"max |KL(p,p)| {worst_self:.1e}", f"hand {hand:.5f}"]
        assert worst_neg >= -1e-9
        assert worst_self <= 1e-10
        assert abs(hand - oracle) < 1e-5 and abs(hand - 0.22629) < 1e-5


# ---------------------------------------------------------------------------
# 3. agreement identity on a context-blind model


def test_criterion_3_stub_agreement():
    with criterion(3, "context-blind stub: zero KL and equal content log-likelihoods") as notes:
        corpus = gen_corpus(60, seed=4)
        vocab = _vocab_for(corpus)
        worst_kl, worst_ll = 0.0, 0.0
        for seed in range(5):
            model = ContextBlindModel(len(vocab), seed=seed)
            for start in range(0, 40, 8):
                batch = collate(corpus.train[start : start + 8], vocab)
                br = score_batch(model, batch, lam=1.0).as_floats()
                worst_kl = max(worst_kl, abs(br.kl_fwd), abs(br.kl_bwd))
                lp_a = model.decode_teacher_forced(None, None, batch.input_a).data
                lp_b = model.decode_teacher_forced(None, None, batch.input_b).data
                rows, pa, pb = content_pairs(batch.layouts)
                gold_a = lp_a[rows, pa, batch.target_a[rows, pa]]
                gold_b = lp_b[rows, pb, batch.target_b[rows, pb]]
                ll_a = np.bincount(rows, gold_a, minlength=len(batch))
                ll_b = np.bincount(rows, gold_b, minlength=len(batch))
                worst_ll = max(worst_ll, float(np.abs(ll_a - ll_b).max()))
        notes += [f"max |KL| {worst_kl:.1e}", f"max content log-likelihood gap {worst_ll:.1e}"]
        assert worst_kl < 1e-8
        assert worst_ll < 1e-6


# ---------------------------------------------------------------------------
# 4. lambda = 0 equals the likelihood-only mode


def test_criterion_4_ablation_equality(tmp_path):
    with criterion(4, "lambda=0 and mle-only give bit-identical metric logs") as notes:
        corpus = gen_corpus(120, seed=5)
        vocab = _vocab_for(corpus)
        cfg = TrainConfig(max_steps=20, warmup_steps=5, checkpoint_every=5, keep_best_k=2, max_tokens=600)
        for seed in (0, 1):
            logs = []
            for name, run_cfg in (("lam0", replace(cfg, seed=seed, lam=0.0, mode="train-tda")),
                                  ("mle", replace(cfg, seed=seed, lam=1.0, mode="train-mle-only"))):
                model = Seq2SeqModel(preset("toy", vocab_size=len(vocab)), seed=seed)
                run_dir = tmp_path / f"{name}_{seed}"
                train(run_cfg, model, corpus.train, corpus.dev, vocab, run_dir=run_dir)
                logs.append((run_dir / "metrics.tsv").read_bytes())
            assert logs[0] == logs[1], f"seed {seed}: metric logs differ"
            notes.append(f"seed {seed}: {len(logs[0].splitlines())} identical lines")


# ---------------------------------------------------------------------------
# 5. paired toy experiment


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    corpus = gen_corpus(2000, seed=0)
    vocab = _vocab_for(corpus)
    model_cfg = preset("toy", vocab_size=len(vocab))
    start = time.perf_counter()
    rows = run_sweep(model_cfg, SWEEP_CONFIG, corpus, vocab, out, seeds=SWEEP_SEEDS, lambdas=(0.0, 1.0),
                     beam_size=5, pretrain_steps=PRETRAIN_STEPS)
    return {"dir": out, "rows": rows, "corpus": corpus, "vocab": vocab, "seconds": time.perf_counter() - start}


def _arm(rows, lam):
    return sorted((r for r in rows if r.lam == lam), key=lambda r: r.seed)


@pytest.mark.slow
def test_criterion_5a_agreement_reduction(sweep):
    with criterion("5a", "mean dev token KL for lambda=1 at least 30% below lambda=0") as notes:
        base, tda = _arm(sweep["rows"], 0.0), _arm(sweep["rows"], 1.0)
        kl0 = float(np.mean([r.dev_kl for r in base]))
        kl1 = float(np.mean([r.dev_kl for r in tda]))
        notes += [f"lambda=0 {kl0:.5f}", f"lambda=1 {kl1:.5f}", f"reduction {100 * (1 - kl1 / kl0):.1f}%"]
        assert kl1 <= 0.7 * kl0


@pytest.mark.slow
def test_criterion_5b_translation_quality(sweep):
    with criterion("5b", "test BLEU for lambda=1 within 0.5 per seed and not below on the mean") as notes:
        base, tda = _arm(sweep["rows"], 0.0), _arm(sweep["rows"], 1.0)
        for b, t in zip(base, tda):
            notes.append(f"seed {b.seed}: {b.test_bleu:.2f} -> {t.test_bleu:.2f}")
        mean0 = float(np.mean([r.test_bleu for r in base]))
        mean1 = float(np.mean([r.test_bleu for r in tda]))
        notes.append(f"mean {mean0:.2f} -> {mean1:.2f}")
        assert all(t.test_bleu >= b.test_bleu - 0.5 for b, t in zip(base, tda))
        assert mean1 >= mean0


@pytest.mark.slow
def test_criterion_5c_recognition_quality(sweep):
    with criterion("5c", "mean test WER for lambda=1 at most lambda=0 + 0.005") as notes:
        base, tda = _arm(sweep["rows"], 0.0), _arm(sweep["rows"], 1.0)
        mean0 = float(np.mean([r.test_wer for r in base]))
        mean1 = float(np.mean([r.test_wer for r in tda]))
        notes.append(f"mean {mean0:.4f} -> {mean1:.4f}")
        assert mean1 <= mean0 + 0.005


@pytest.mark.slow
def test_criterion_5_run_budget_and_training_progress(sweep):
    with criterion("5d", "each run under 30 CPU minutes and dev loss falls") as notes:
        out = sweep["dir"]
        worst = max(r.train_seconds for r in sweep["rows"])
        notes.append(f"slowest training {worst / 60:.1f} min")
        assert worst < RUN_BUDGET_SECONDS
        for r in sweep["rows"]:
            log = read_metric_log(out / f"seed{r.seed}_lam{r.lam:g}" / "metrics.tsv")
            assert log[-1][0] == SWEEP_CONFIG.max_steps
            assert log[-1][5] < log[0][5]
        assert len(read_summary(out / "summary.tsv")) == 2 * len(SWEEP_SEEDS)
        assert (out / "sweep.png").stat().st_size > 0


# ---------------------------------------------------------------------------
# 6. inference protocol


@pytest.mark.slow
def test_criterion_6_inference_protocol(sweep):
    with criterion(6, "greedy ST equals the translation segment of full decoding; |output|+1 steps") as notes:
        ckpt = load_checkpoint(sweep["dir"] / "seed0_lam1" / "averaged.ckpt")
        model = model_from_checkpoint(ckpt)
        held_out = sweep["corpus"].test
        assert len(held_out) == 100
        greedy = dict(beam_size=1, length_normalize=False)
        mismatches, bad_steps = [], []
        for ex in held_out:
            feats = ex.features()
            st_out = decode_st(model, feats, DecodeRequest("ST", **greedy))
            full = decode_full(model, feats, DecodeRequest("FULL-ST-BT", **greedy))
            if st_out.tokens != full.first:
                mismatches.append(ex.id)
            if st_out.steps != len(st_out.tokens) + 1:
                bad_steps.append(ex.id)
        notes += [f"{100 - len(mismatches)}/100 exact", f"{100 - len(bad_steps)}/100 step counts"]
        assert not mismatches and not bad_steps


# ---------------------------------------------------------------------------
# 7. beam oracle


def test_criterion_7_beam_oracle():
    with criterion(7, "beam 5 finds the exhaustive optimum on random stub scorers") as notes:
        rng = np.random.default_rng(7)
        hits = 0
        for case in range(100):
            V = int(rng.integers(4, 7))
            max_len = int(rng.integers(1, 5))
            scorer = TableScorer(V, seed=int(rng.integers(0, 2**31)))
            start, stops = (TGT_TAG, (SRC_TAG, EOS)) if case % 2 else (SRC_TAG, (TGT_TAG, EOS))
            hyp = beam_search(scorer, start, stops, beam_size=5, max_len=max_len, length_normalize=False)
            tokens, score = exhaustive_best(scorer, start, stops, V, max_len)
            hits += hyp.tokens == tokens and abs(hyp.score - score) < 1e-9
        notes.append(f"{hits}/100")
        assert hits == 100


# ---------------------------------------------------------------------------
# 8. metric oracles


def _edit_distance_table(a, b):
    d = [[i + j if i * j == 0 else 0 for j in range(len(b) + 1)] for i in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def test_criterion_8_metric_oracles():
    with criterion(8, "WER and BLEU worked examples; identical corpora give 100 and 0") as notes:
        ref, hyp = "a b c d".split(), "a x c".split()
        wer_oracle = _edit_distance_table(ref, hyp) / len(ref)
        # hand counts for "a b x d" against "a b c d": 3/4, 1/3, smoothed 1/3 and 1/2
        precisions = [Fraction(3, 4), Fraction(1, 3), Fraction(0 + 1, 2 + 1), Fraction(0 + 1, 1 + 1)]
        bleu_oracle = 100 * math.exp(sum(math.log(float(p)) for p in precisions) / 4)
        assert wer_oracle == 0.5 and abs(bleu_oracle - 45.18) < 1e-2
        got_wer = wer(ref, hyp)
        got_bleu = bleu(["a b c d"], ["a b x d"])
        notes += [f"WER {got_wer:.4f}", f"BLEU {got_bleu:.4f}"]
        assert abs(got_wer - wer_oracle) < 1e-3 and abs(got_wer - 0.5) < 1e-3
        assert abs(got_bleu - bleu_oracle) < 1e-3
        corpus = gen_corpus(100, seed=8)
        refs = [ex.translation for ex in corpus.all()]
        trans = [ex.transcription for ex in corpus.all()]
        assert bleu(refs, refs) == 100.0
        assert corpus_wer(trans, trans) == 0.0


# ---------------------------------------------------------------------------
# 9. reproducibility


def test_criterion_9_byte_identical_reruns(tmp_path):
    with criterion(9, "every CLI command rerun gives byte-identical artifacts") as notes:
        first = run_pipeline(tmp_path / "first")
        second = run_pipeline(tmp_path / "second")
        assert first == second == [0] * len(first)
        a, b = snapshot(tmp_path / "first"), snapshot(tmp_path / "second")
        assert set(a) == set(b)
        differing = sorted(k for k in a if a[k] != b[k])
        notes.append(f"{len(a)} files compared")
        assert not differing, f"differing artifacts: {differing[:5]}"
