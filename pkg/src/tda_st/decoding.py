"""Tag-switched beam search.

The start tag picks the decomposition path: ``<2tgt>`` starts ST-BT (translation
first), ``<2src>`` starts ASR-MT (transcription first).  Single-task decoding
stops as soon as the opposite tag is produced, so it costs exactly one decoder
call per emitted token plus one for the stop token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import EOS, SRC_TAG, TGT_TAG
from .nn import subsampled_length

PATHS = ("ST", "ASR", "FULL-ST-BT", "FULL-ASR-MT")
_SPECIAL = {0, EOS, SRC_TAG, TGT_TAG, 4}


@dataclass
class BeamHypothesis:
    tokens: list[int]
    score: float = 0.0
    finished: bool = False
    reason: str | None = None  # "stop-tag", "eos" or "max-length"
    step_logprobs: list[float] = field(default_factory=list)

    @property
    def length(self) -> int:
        """Emitted tokens (the start tag is not counted)."""
        return len(self.tokens) - 1

    def ranking_score(self, length_normalize: bool) -> float:
        return self.score / max(self.length, 1) if length_normalize else self.score


@dataclass
class DecodeRequest:
    path: str = "ST"
    beam_size: int = 5
    max_len: int | None = None
    length_normalize: bool = True

    def __post_init__(self) -> None:
        if self.path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def _rank_key(h: BeamHypothesis, length_normalize: bool):
    return (-h.ranking_score(length_normalize), h.tokens)


def beam_search(
    scorer: Callable[[list[list[int]]], np.ndarray],
    start_tag: int,
    stop_tokens: Sequence[int],
    beam_size: int = 5,
    max_len: int = 50,
    length_normalize: bool = True,
) -> BeamHypothesis:
    """Best hypothesis under ``scorer``.

    ``scorer`` maps a list of equal-length prefixes to ``(n, vocab)`` next-token
    log-probabilities.  Each step keeps the ``beam_size`` highest raw-score
    extensions (ties go to the lexicographically smaller token sequence);
    extensions ending in a stop token are set aside as finished.  Ranking of
    finished hypotheses optionally divides by emitted length.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    stops = set(int(s) for s in stop_tokens)
    if not stops:
        raise ValueError("stop_tokens must be non-empty")
    alive = [BeamHypothesis([int(start_tag)])]
    finished: list[BeamHypothesis] = []
    for t in range(max_len):
        lp = np.asarray(scorer([h.tokens for h in alive]), dtype=np.float64)
        totals = np.array([h.score for h in alive])[:, None] + lp
        flat = totals.ravel()
        V = lp.shape[1]
        # candidate pool: enough to fill the beam and break ties deterministically
        k = min(flat.size, beam_size)
        cutoff = np.partition(-flat, k - 1)[k - 1]
        pool = np.nonzero(-flat <= cutoff)[0]
        cands = sorted(
            ((float(flat[j]), alive[j // V].tokens + [int(j % V)], j) for j in pool),
            key=lambda c: (-c[0], c[1]),
        )[:beam_size]
        next_alive = []
        for score, tokens, j in cands:
            parent = alive[j // V]
            h = BeamHypothesis(tokens, score, step_logprobs=parent.step_logprobs + [float(lp[j // V, j % V])])
            if tokens[-1] in stops:
                h.finished = True
                h.reason = "eos" if tokens[-1] == EOS else "stop-tag"
                finished.append(h)
            else:
                next_alive.append(h)
        alive = next_alive
        if not alive:
            break
        if t == max_len - 1:
            for h in alive:
                h.finished, h.reason = True, "max-length"
            finished.extend(alive)
            alive = []
            break
        if not length_normalize and finished:
            # log-probs are <= 0, so alive hypotheses can only get worse
            if max(h.score for h in finished) >= max(h.score for h in alive):
                break
    return min(finished, key=lambda h: _rank_key(h, length_normalize))


class ModelScorer:
    """Wraps a model and one utterance; counts decoder invocations in ``steps``."""

    def __init__(self, model, features):
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValueError("features must be a non-empty (frames, feat_dim) matrix")
        self.model = model
        with T.no_grad():
            enc = model.encode(feats[None])
        if enc.memory.shape[1] == 0:
            raise ValueError("empty encoder memory")
        self.memory = enc.memory
        self.mask = enc.mask
        self.frames = feats.shape[0]
        self.steps = 0
        self._tiled: dict[int, tuple] = {}

    def __call__(self, prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        if n not in self._tiled:
            self._tiled[n] = (T.Tensor(np.repeat(self.memory.data, n, axis=0), dtype=self.memory.dtype),
                              np.repeat(self.mask, n, axis=0))
        mem, mask = self._tiled[n]
        self.steps += 1
        return self.model.next_token_logprobs(mem, mask, np.asarray(prefixes, dtype=np.int64))


def default_max_len(model, frames: int) -> int:
    return 3 * int(subsampled_length(frames, model.config)) + 10


@dataclass
class DecodeResult:
    tokens: list[int]
    score: float
    hypothesis: BeamHypothesis
    steps: int
    status: str = "ok"  # "ok" or "empty"


@dataclass
class FullDecodeResult:
    first: list[int]
    second: list[int]
    score: float
    hypothesis: BeamHypothesis
    steps: int
    missing_interior_tag: bool = False


def _content(tokens) -> list[int]:
    return [t for t in tokens if t not in _SPECIAL]


def _single_path(model, features, request: DecodeRequest, start: int, stop: int) -> DecodeResult:
    scorer = ModelScorer(model, features)
    max_len = request.max_len or default_max_len(model, scorer.frames)
    hyp = beam_search(scorer, start, (stop, EOS), request.beam_size, max_len, request.length_normalize)
    out = _content(hyp.tokens[1:])
    return DecodeResult(out, hyp.score, hyp, scorer.steps, "ok" if out else "empty")


def decode_st(model, features, request: DecodeRequest | None = None) -> DecodeResult:
    """Translation via the ST-BT path, stopping at ``<2src>``."""
    return _single_path(model, features, request or DecodeRequest("ST"), TGT_TAG, SRC_TAG)


def decode_asr(model, features, request: DecodeRequest | None = None) -> DecodeResult:
    """Transcription via the ASR-MT path, stopping at ``<2tgt>``."""
    return _single_path(model, features, request or DecodeRequest("ASR"), SRC_TAG, TGT_TAG)


def decode_full(model, features, request: DecodeRequest) -> FullDecodeResult:
    """Decode both segments until EOS and split at the interior tag.

    Segment order follows the path: FULL-ST-BT gives (translation,
    transcription), FULL-ASR-MT gives (transcription, translation).
    """
    if request.path == "FULL-ST-BT":
        start, interior = TGT_TAG, SRC_TAG
    elif request.path == "FULL-ASR-MT":
        start, interior = SRC_TAG, TGT_TAG
    else:
        raise ValueError("decode_full needs path FULL-ST-BT or FULL-ASR-MT")
    scorer = ModelScorer(model, features)
    max_len = request.max_len or default_max_len(model, scorer.frames)
    hyp = beam_search(scorer, start, (EOS,), request.beam_size, max_len, request.length_normalize)
    body = hyp.tokens[1:]
    if interior in body:
        cut = body.index(interior)
        first, second, missing = body[:cut], body[cut + 1 :], False
    else:
        first, second, missing = body, [], True
    return FullDecodeResult(_content(first), _content(second), hyp.score, hyp, scorer.steps, missing)


def decode(model, features, request: DecodeRequest):
    if request.path == "ST":
        return decode_st(model, features, request)
    if request.path == "ASR":
        return decode_asr(model, features, request)
    return decode_full(model, features, request)


def format_decode_line(ex_id: str, path: str, result, vocab) -> str:
    if isinstance(result, FullDecodeResult):
        text = f"{vocab.decode(result.first)}\t{vocab.decode(result.second)}"
    else:
        text = vocab.decode(result.tokens)
    return f"{ex_id}\t{path}\t{result.score:.6f}\t{text}"


def parse_decode_line(line: str) -> tuple[str, str, float, list[str]]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 4:
        raise ValueError(f"malformed decode line: {line!r}")
    return parts[0], parts[1], float(parts[2]), parts[3:]


def rescore(model, features, tokens: Sequence[int]) -> float:
    """Teacher-forced log-probability of ``tokens[1:]`` given ``tokens[0]`` as start tag."""
    scorer = ModelScorer(model, features)
    toks = np.asarray(tokens, dtype=np.int64)[None]
    with T.no_grad():
        lp = model.decode_teacher_forced(scorer.memory, scorer.mask, toks[:, :-1]).data[0]
    return float(np.sum(lp[np.arange(len(tokens) - 1), toks[0, 1:]], dtype=np.float64))
