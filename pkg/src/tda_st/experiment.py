"""Paired lambda sweep: same data, same seeds, only the agreement weight differs."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from . import decoding, metrics
from .data import Corpus, Vocabulary
from .nn import ModelConfig, Seq2SeqModel
from .trainer import TrainConfig, init_from_checkpoint, load_checkpoint, model_from_checkpoint, train

logger = logging.getLogger(__name__)

# wall-clock time is reported on stdout only, so summary files stay reproducible
SUMMARY_COLUMNS = ("lambda", "seed", "dev_kl_fwd", "dev_kl_bwd", "dev_kl", "dev_nll_gap", "test_bleu", "test_wer")


@dataclass
class RunSummary:
    lam: float
    seed: int
    dev_kl_fwd: float
    dev_kl_bwd: float
    dev_nll_gap: float
    test_bleu: float
    test_wer: float
    train_seconds: float

    @property
    def dev_kl(self) -> float:
        return self.dev_kl_fwd + self.dev_kl_bwd

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "seed": self.seed, "dev_kl_fwd": self.dev_kl_fwd,
                "dev_kl_bwd": self.dev_kl_bwd, "dev_kl": self.dev_kl, "dev_nll_gap": self.dev_nll_gap,
                "test_bleu": self.test_bleu, "test_wer": self.test_wer, "train_seconds": self.train_seconds}


def evaluate_model(model, corpus: Corpus, vocab: Vocabulary, beam_size: int = 5, max_len: int | None = None,
                   length_normalize: bool = True) -> dict:
    """Dev agreement plus test BLEU (ST path) and WER (ASR path)."""
    rep = metrics.agreement_report(model, corpus.dev, vocab)
    request_st = decoding.DecodeRequest("ST", beam_size, max_len, length_normalize)
    request_asr = decoding.DecodeRequest("ASR", beam_size, max_len, length_normalize)
    hyp_y, hyp_z = [], []
    for ex in corpus.test:
        feats = ex.features()
        hyp_y.append(vocab.decode(decoding.decode_st(model, feats, request_st).tokens))
        hyp_z.append(vocab.decode(decoding.decode_asr(model, feats, request_asr).tokens))
    return {
        "dev_kl_fwd": rep.kl_fwd,
        "dev_kl_bwd": rep.kl_bwd,
        "dev_nll_gap": rep.nll_gap,
        "test_bleu": metrics.bleu([ex.translation for ex in corpus.test], hyp_y),
        "test_wer": metrics.corpus_wer([ex.transcription for ex in corpus.test], hyp_z),
    }


def pretrain_encoder(model_config: ModelConfig, train_config: TrainConfig, corpus: Corpus, vocab: Vocabulary,
                     run_dir, steps: int) -> float:
    """Transcription-only training; returns wall-clock seconds. ``run_dir/last.ckpt`` holds the result."""
    model = Seq2SeqModel(model_config, seed=train_config.seed)
    start = time.perf_counter()
    cfg = replace(train_config, mode="pretrain-asr", max_steps=steps)
    train(cfg, model, corpus.train, corpus.dev, vocab, run_dir=Path(run_dir))
    return time.perf_counter() - start


def run_one(model_config: ModelConfig, train_config: TrainConfig, corpus: Corpus, vocab: Vocabulary,
            run_dir, beam_size: int = 5, init_from=None, extra_seconds: float = 0.0,
            **decode_options) -> RunSummary:
    """Train one arm and score its averaged checkpoint.

    ``init_from`` names a checkpoint whose encoder seeds the model; ``extra_seconds``
    (time spent producing it) is added to the reported training time.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = Seq2SeqModel(model_config, seed=train_config.seed)
    if init_from is not None:
        init_from_checkpoint(model, load_checkpoint(init_from))
    start = time.perf_counter()
    train(train_config, model, corpus.train, corpus.dev, vocab, run_dir=run_dir)
    seconds = time.perf_counter() - start + extra_seconds
    averaged = model_from_checkpoint(load_checkpoint(run_dir / "averaged.ckpt"))
    scores = evaluate_model(averaged, corpus, vocab, beam_size, **decode_options)
    return RunSummary(train_config.lam, train_config.seed, train_seconds=seconds, **scores)


def write_summary(path, rows: Sequence[RunSummary]) -> None:
    lines = ["\t".join(SUMMARY_COLUMNS)]
    for r in rows:
        d = r.as_dict()
        lines.append("\t".join(_fmt(d[c]) for c in SUMMARY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_summary(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        values = line.split("\t")
        row = {k: float(v) for k, v in zip(header, values)}
        row["seed"] = int(row["seed"])
        out.append(row)
    return out


def run_sweep(model_config: ModelConfig, base: TrainConfig, corpus: Corpus, vocab: Vocabulary, out_dir,
              seeds: Sequence[int] = (0, 1, 2), lambdas: Sequence[float] = (0.0, 1.0),
              beam_size: int = 5, max_len: int | None = None, length_normalize: bool = True,
              pretrain_steps: int = 0) -> list[RunSummary]:
    """Train and evaluate every (seed, lambda) pair; writes ``summary.tsv`` and ``sweep.png``.

    Only the lambda and the seed change between runs, so differences within a
    seed are attributable to the agreement term. With ``pretrain_steps > 0`` each
    seed first gets a transcription-only run whose encoder initializes every arm
    of that seed; its time is charged to each arm.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        init_from, pre_seconds = None, 0.0
        if pretrain_steps > 0:
            logger.info("sweep pretrain seed=%d", seed)
            asr_dir = out_dir / f"seed{seed}_asr"
            pre_seconds = pretrain_encoder(model_config, replace(base, seed=seed), corpus, vocab, asr_dir,
                                           pretrain_steps)
            init_from = asr_dir / "last.ckpt"
        for lam in lambdas:
            cfg = replace(base, seed=seed, lam=lam, mode="train-tda")
            logger.info("sweep run seed=%d lambda=%g", seed, lam)
            summary = run_one(model_config, cfg, corpus, vocab, out_dir / f"seed{seed}_lam{lam:g}", beam_size,
                              init_from=init_from, extra_seconds=pre_seconds,
                              max_len=max_len, length_normalize=length_normalize)
            rows.append(summary)
            write_summary(out_dir / "summary.tsv", rows)
    from .plotting import plot_lambda_sweep

    plot_lambda_sweep([r.as_dict() for r in rows], out_dir / "sweep.png")
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
