"""Dual-layout joint likelihood with bidirectional KL agreement.

One decoder scores two orderings of the same triplet:

* layout A (ASR-MT): ``<2src> z <2tgt> y`` predicting ``z <2tgt> y </s>``
* layout B (ST-BT):  ``<2tgt> y <2src> z`` predicting ``y <2src> z </s>``

Chain-rule consistency says both factorisations give the same joint
probability.  The agreement terms compare, token by token, the distribution
over each ``y_t`` (and ``z_t``) obtained with and without the other segment in
context, in both KL directions.  The training loss is

    total = nll_A + nll_B + lambda * (kl_fwd + kl_bwd)

with every term summed over tokens and divided by the number of target tokens
in both layouts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import EOS, PAD, SRC_TAG, TGT_TAG, Batch, Vocabulary
from .tensor import Tensor


@dataclass(frozen=True)
class DualLayout:
    input_a: list[int]
    target_a: list[int]
    input_b: list[int]
    target_b: list[int]
    z_span_a: tuple[int, int]
    y_span_a: tuple[int, int]
    z_span_b: tuple[int, int]
    y_span_b: tuple[int, int]

    def extract_a(self) -> tuple[list[int], list[int]]:
        return self.target_a[slice(*self.z_span_a)], self.target_a[slice(*self.y_span_a)]

    def extract_b(self) -> tuple[list[int], list[int]]:
        return self.target_b[slice(*self.z_span_b)], self.target_b[slice(*self.y_span_b)]


def build_dual_layouts(z, y, vocab: Vocabulary | None = None) -> DualLayout:
    z = [int(t) for t in z]
    y = [int(t) for t in y]
    if not z or not y:
        raise ValueError("transcription and translation must be non-empty")
    n_special = 5 if vocab is None else sum(1 for t in range(len(vocab)) if vocab.is_special(t))
    if any(t < n_special for t in z + y):
        raise ValueError("special token inside transcription or translation")
    nz, ny = len(z), len(y)
    return DualLayout(
        input_a=[SRC_TAG, *z, TGT_TAG, *y],
        target_a=[*z, TGT_TAG, *y, EOS],
        input_b=[TGT_TAG, *y, SRC_TAG, *z],
        target_b=[*y, SRC_TAG, *z, EOS],
        z_span_a=(0, nz),
        y_span_a=(nz + 1, nz + 1 + ny),
        z_span_b=(ny + 1, ny + 1 + nz),
        y_span_b=(0, ny),
    )


def nll_loss(logprobs: Tensor, target, target_mask=None, label_smoothing: float = 0.0,
             smoothing_exclude: int | None = PAD) -> tuple[Tensor, Tensor]:
    """Label-smoothed negative log-likelihood.

    ``logprobs`` is ``(..., positions, vocab)``; ``target`` has the leading
    shape.  ``target_mask`` is True on positions that carry loss (all positions
    when omitted).  The smoothing mass is spread uniformly over the vocabulary
    minus ``smoothing_exclude``.

    Returns ``(sum over real positions, per-position losses)``.
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    target = np.asarray(target)
    V = logprobs.shape[-1]
    if target.shape != logprobs.shape[:-1]:
        raise T.ShapeError(f"target shape {target.shape} does not match logprobs {logprobs.shape}")
    if target.min() < 0 or target.max() >= V:
        raise ValueError(f"target id outside vocabulary of size {V}")
    weights = np.ones(target.shape, dtype=logprobs.dtype) if target_mask is None else np.asarray(target_mask, dtype=logprobs.dtype)
    onehot = np.zeros(logprobs.shape, dtype=logprobs.dtype)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    coef = (1.0 - label_smoothing) * onehot
    if label_smoothing > 0:
        smooth = np.ones(V, dtype=logprobs.dtype)
        if smoothing_exclude is not None:
            smooth[smoothing_exclude] = 0.0
        coef = coef + label_smoothing * smooth / smooth.sum()
    per_token = T.neg(T.sum(T.mul(logprobs, Tensor(coef * weights[..., None], dtype=logprobs.dtype)), axis=-1))
    return T.sum(per_token), per_token


def token_kl(p_logprobs, q_logprobs) -> Tensor:
    """KL(p || q) = sum_v p(v) (log p(v) - log q(v)), summed over any leading rows."""
    p = p_logprobs if isinstance(p_logprobs, Tensor) else Tensor(p_logprobs)
    q = q_logprobs if isinstance(q_logprobs, Tensor) else Tensor(q_logprobs, dtype=p.dtype)
    if p.shape != q.shape:
        raise T.ShapeError(f"vocab mismatch: {p.shape} vs {q.shape}")
    return T.sum(T.mul(T.exp(p), T.sub(p, q)))


def content_pairs(layouts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays ``(row, pos_a, pos_b)`` pairing every content token across layouts."""
    rows, pa, pb = [], [], []
    for i, lay in enumerate(layouts):
        for span_a, span_b in ((lay.y_span_a, lay.y_span_b), (lay.z_span_a, lay.z_span_b)):
            na, nb = span_a[1] - span_a[0], span_b[1] - span_b[0]
            if na != nb:
                raise ValueError(f"span mismatch between layouts: {span_a} vs {span_b}")
            rows.extend([i] * na)
            pa.extend(range(*span_a))
            pb.extend(range(*span_b))
    return np.array(rows, dtype=np.int64), np.array(pa, dtype=np.int64), np.array(pb, dtype=np.int64)


def kl_agreement(logprobs_a: Tensor, logprobs_b: Tensor, layouts) -> tuple[Tensor, Tensor]:
    """Summed forward and backward KL over all content positions.

    Accepts one example (``(positions, vocab)`` with a single layout) or a batch
    (``(batch, positions, vocab)`` with a list of layouts).  Forward KL puts the
    layout-A distribution first for both segments: for ``y`` that conditions on
    ``z`` (ASR-MT), for ``z`` it does not (ASR-MT has not produced ``y`` yet).
    """
    if isinstance(layouts, DualLayout):
        layouts = [layouts]
        logprobs_a = T.reshape(logprobs_a, (1, *logprobs_a.shape))
        logprobs_b = T.reshape(logprobs_b, (1, *logprobs_b.shape))
    rows, pa, pb = content_pairs(layouts)
    a = logprobs_a[rows, pa]
    b = logprobs_b[rows, pb]
    return token_kl(a, b), token_kl(b, a)


@dataclass
class LossBreakdown:
    """Loss terms; values may be tensors (for backward) or plain floats."""

    nll_a: Tensor | float
    nll_b: Tensor | float
    kl_fwd: Tensor | float
    kl_bwd: Tensor | float
    lam: float
    total: Tensor | float
    n_tokens: int = 0

    def as_floats(self) -> LossBreakdown:
        f = lambda v: v.item() if isinstance(v, Tensor) else float(v)  # noqa: E731
        return LossBreakdown(f(self.nll_a), f(self.nll_b), f(self.kl_fwd), f(self.kl_bwd), self.lam, f(self.total), self.n_tokens)


def tda_objective(nll_a, nll_b, kl_fwd, kl_bwd, lam: float) -> LossBreakdown:
    """Combine the four terms; ``lam = 0`` gives the plain dual-layout likelihood."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    total = nll_a + nll_b
    if lam != 0 or isinstance(kl_fwd, Tensor):
        total = total + (kl_fwd + kl_bwd) * lam
    return LossBreakdown(nll_a, nll_b, kl_fwd, kl_bwd, lam, total)


def score_batch(model, batch: Batch, lam: float, label_smoothing: float = 0.0, *,
                train: bool = False, rng=None, kl_in_graph: bool = True,
                normalizer: float | None = None) -> LossBreakdown:
    """Teacher-force both layouts of ``batch`` through one encoder pass.

    Every term is divided by ``normalizer`` (default: the batch's target token
    count over both layouts).  With ``kl_in_graph=False`` the KL terms are
    computed for reporting only and contribute nothing to the graph.
    """
    enc = model.encode(batch.features, batch.feature_lengths, train=train, rng=rng)
    B = len(batch)
    memory = T.concat([enc.memory, enc.memory], axis=0)
    mem_mask = np.concatenate([enc.mask, enc.mask], axis=0)
    tokens = np.concatenate([batch.input_a, batch.input_b], axis=0)
    pad = ~np.concatenate([batch.target_mask, batch.target_mask], axis=0)
    lp = model.decode_teacher_forced(memory, mem_mask, tokens, pad, train=train, rng=rng)
    lp_a, lp_b = lp[:B], lp[B:]
    n = float(normalizer if normalizer is not None else batch.n_target_tokens)
    nll_a, _ = nll_loss(lp_a, batch.target_a, batch.target_mask, label_smoothing)
    nll_b, _ = nll_loss(lp_b, batch.target_b, batch.target_mask, label_smoothing)
    if kl_in_graph:
        kl_f, kl_b = kl_agreement(lp_a, lp_b, batch.layouts)
    else:
        with T.no_grad():
            kl_f, kl_b = kl_agreement(lp_a, lp_b, batch.layouts)
        kl_f, kl_b = kl_f.item(), kl_b.item()
    inv = 1.0 / n
    kl_f = T.scale(kl_f, inv) if isinstance(kl_f, Tensor) else kl_f * inv
    kl_b = T.scale(kl_b, inv) if isinstance(kl_b, Tensor) else kl_b * inv
    out = tda_objective(T.scale(nll_a, inv), T.scale(nll_b, inv), kl_f, kl_b, lam)
    out.n_tokens = batch.n_target_tokens
    return out


def score_batch_asr(model, batch: Batch, label_smoothing: float = 0.0, *, train: bool = False,
                    rng=None, normalizer: float | None = None) -> LossBreakdown:
    """Transcription-only likelihood: layout A truncated at the ``<2tgt>`` tag."""
    enc = model.encode(batch.features, batch.feature_lengths, train=train, rng=rng)
    mask = np.zeros_like(batch.target_mask)
    for i, lay in enumerate(batch.layouts):
        mask[i, : lay.z_span_a[1] + 1] = True
    U = int(mask.sum(axis=1).max())
    lp = model.decode_teacher_forced(enc.memory, enc.mask, batch.input_a[:, :U], ~mask[:, :U], train=train, rng=rng)
    n = float(normalizer if normalizer is not None else mask.sum())
    nll, _ = nll_loss(lp, batch.target_a[:, :U], mask[:, :U], label_smoothing)
    nll = T.scale(nll, 1.0 / n)
    out = LossBreakdown(nll, 0.0, 0.0, 0.0, 0.0, nll, int(mask.sum()))
    return out
