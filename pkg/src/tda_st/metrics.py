"""WER, corpus BLEU and dual-path agreement diagnostics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Vocabulary, collate, make_batches
from .objective import content_pairs


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(reference, hypothesis) / len(reference)


def corpus_wer(references: Sequence[str], hypotheses: Sequence[str]) -> float:
    """Total word edits over total reference words."""
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in length")
    edits = words = 0
    for ref, hyp in zip(references, hypotheses):
        r = ref.split()
        if not r:
            raise ValueError("reference must be non-empty")
        edits += edit_distance(r, hyp.split())
        words += len(r)
    return edits / words


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(references: Sequence[str], hypotheses: Sequence[str], max_order: int = 4) -> float:
    """Corpus BLEU on whitespace tokens, in [0, 100].

    Orders >= 2 with no matches use (matches + 1) / (total + 1); brevity
    penalty exp(1 - r/c) applies when the hypothesis corpus is shorter.
    """
    if len(references) != len(hypotheses):
        raise ValueError("references and hypotheses differ in length")
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    matches = [0] * max_order
    totals = [0] * max_order
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        r, h = ref.split(), hyp.split()
        ref_len += len(r)
        hyp_len += len(h)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_order):
        if n > 0 and matches[n] == 0:
            p = 1.0 / (totals[n] + 1)
        else:
            p = matches[n] / totals[n]
        log_p += math.log(p) / max_order
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# agreement


@dataclass
class ExampleRecord:
    id: str
    nll_a: float
    nll_b: float
    kl_fwd: float
    kl_bwd: float
    n_content: int


@dataclass
class EvalReport:
    bleu: float | None = None
    wer: float | None = None
    kl_fwd: float | None = None
    kl_bwd: float | None = None
    nll_gap: float | None = None
    n_examples: int = 0
    records: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def corpus_metrics(self) -> dict:
        out = {"n_examples": self.n_examples}
        for key in ("bleu", "wer", "kl_fwd", "kl_bwd", "nll_gap"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out.update(self.extra)
        return out


def agreement_report(model, examples, vocab: Vocabulary, max_tokens: int = 4000) -> EvalReport:
    """Teacher-force both layouts and measure how far the two paths disagree.

    ``kl_fwd`` / ``kl_bwd`` are per content token; ``nll_gap`` is the mean over
    examples of |nll_A - nll_B| (sequence level, no smoothing).
    """
    records = []
    with T.no_grad():
        for group in make_batches(examples, max_tokens):
            batch = collate(group, vocab)
            enc = model.encode(batch.features, batch.feature_lengths)
            B = len(batch)
            memory = T.concat([enc.memory, enc.memory], axis=0)
            mask = np.concatenate([enc.mask, enc.mask], axis=0)
            tokens = np.concatenate([batch.input_a, batch.input_b], axis=0)
            pad = ~np.concatenate([batch.target_mask, batch.target_mask], axis=0)
            lp = model.decode_teacher_forced(memory, mask, tokens, pad).data.astype(np.float64)
            lp_a, lp_b = lp[:B], lp[B:]
            gold_a = np.take_along_axis(lp_a, batch.target_a[..., None], -1)[..., 0] * batch.target_mask
            gold_b = np.take_along_axis(lp_b, batch.target_b[..., None], -1)[..., 0] * batch.target_mask
            rows, pa, pb = content_pairs(batch.layouts)
            pa_rows, pb_rows = lp_a[rows, pa], lp_b[rows, pb]
            fwd = (np.exp(pa_rows) * (pa_rows - pb_rows)).sum(-1)
            bwd = (np.exp(pb_rows) * (pb_rows - pa_rows)).sum(-1)
            kf = np.bincount(rows, fwd, minlength=B)
            kb = np.bincount(rows, bwd, minlength=B)
            nc = np.bincount(rows, minlength=B)
            for i, ex_id in enumerate(batch.ids):
                records.append(ExampleRecord(ex_id, float(-gold_a[i].sum()), float(-gold_b[i].sum()),
                                             float(kf[i]), float(kb[i]), int(nc[i])))
    records.sort(key=lambda r: r.id)
    n_tok = sum(r.n_content for r in records)
    return EvalReport(
        kl_fwd=sum(r.kl_fwd for r in records) / max(n_tok, 1),
        kl_bwd=sum(r.kl_bwd for r in records) / max(n_tok, 1),
        nll_gap=float(np.mean([abs(r.nll_a - r.nll_b) for r in records])) if records else 0.0,
        n_examples=len(records),
        records=records,
    )


def write_report(path, report: EvalReport) -> None:
    """``key=value`` corpus metrics, a blank line, then a per-example TSV block."""
    lines = [f"{k}={_fmt(v)}" for k, v in report.corpus_metrics().items()]
    lines.append("")
    if report.records:
        first = report.records[0]
        cols = list(first.__dataclass_fields__) if hasattr(first, "__dataclass_fields__") else list(first)
        lines.append("\t".join(cols))
        for r in report.records:
            values = [getattr(r, c) for c in cols] if hasattr(r, "__dataclass_fields__") else [r[c] for c in cols]
            lines.append("\t".join(_fmt(v) for v in values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report_metrics(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            break
        key, _, value = line.partition("=")
        try:
            out[key] = float(value)
        except ValueError:
            out[key] = value
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
