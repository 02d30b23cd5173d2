"""Synthetic triplet corpus (speech features, transcription, translation).

The source language is lowercase words over ``a-z``; the target language is a
per-word Caesar cipher into ``A-Z`` followed by word-order reversal, which is
invertible and non-monotone.  Speech features are noisy per-character
prototype vectors, three frames per character.
"""

from __future__ import annotations

import hashlib
import io
import os
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, EOS, SRC_TAG, TGT_TAG, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "</s>", "<2src>", "<2tgt>", "<unk>")
SPACE_SYMBOL = "▁"

SOURCE_ALPHABET = string.ascii_lowercase
TARGET_ALPHABET = string.ascii_uppercase
CIPHER_SHIFT = 3
FRAMES_PER_SYMBOL = 3
FEAT_DIM = 16
PROTOTYPE_SEED = 1234
LEXICON_SEED = 20240601
LEXICON_SIZE = 200

FEATURE_MAGIC = b"TDAFEAT1"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<8sIII")


class DataError(ValueError):
    """Malformed corpus input."""


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Shared character vocabulary; ids 0-4 are reserved for special tokens."""

    def __init__(self, content_tokens: Iterable[str]):
        content = sorted(set(content_tokens) - set(SPECIAL_TOKENS))
        self.tokens: list[str] = list(SPECIAL_TOKENS) + content
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocabulary:
        symbols = set()
        for text in texts:
            symbols.update(_symbols(text))
        return cls(symbols)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad(self) -> int:
        return PAD

    @property
    def eos(self) -> int:
        return EOS

    @property
    def src_tag(self) -> int:
        return SRC_TAG

    @property
    def tgt_tag(self) -> int:
        return TGT_TAG

    @property
    def unk(self) -> int:
        return UNK

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIAL_TOKENS)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(sym, UNK) for sym in _symbols(text)]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and self.is_special(i):
                continue
            tok = self.tokens[i] if 0 <= i < len(self.tokens) else SPECIAL_TOKENS[UNK]
            out.append(" " if tok == SPACE_SYMBOL else tok)
        return "".join(out)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError(f"{path}: vocabulary must start with {SPECIAL_TOKENS}")
        vocab = cls(lines[len(SPECIAL_TOKENS):])
        if vocab.tokens != lines:
            raise DataError(f"{path}: content tokens must be unique and sorted")
        return vocab


def _symbols(text: str) -> list[str]:
    return [SPACE_SYMBOL if ch == " " else ch for ch in text]


# ---------------------------------------------------------------------------
# text side


def translate_rule(text: str) -> str:
    """Cipher every word into the target alphabet (shift 3), then reverse word order.

    >>> translate_rule("ab cd")
    'FG DE'
    """
    words = text.split(" ")
    out = []
    for word in words:
        chars = []
        for ch in word:
            if ch not in SOURCE_ALPHABET:
                raise DataError(f"character {ch!r} outside the source alphabet")
            chars.append(TARGET_ALPHABET[(SOURCE_ALPHABET.index(ch) + CIPHER_SHIFT) % 26])
        out.append("".join(chars))
    return " ".join(reversed(out))


def inverse_translate_rule(text: str) -> str:
    words = text.split(" ")
    out = []
    for word in reversed(words):
        out.append("".join(SOURCE_ALPHABET[(TARGET_ALPHABET.index(c) - CIPHER_SHIFT) % 26] for c in word))
    return " ".join(out)


def build_lexicon(word_len_range: tuple[int, int] = (2, 5), size: int = LEXICON_SIZE) -> list[str]:
    """Fixed word list (independent of the corpus seed)."""
    lo, hi = word_len_range
    if lo < 1 or hi < lo:
        raise DataError(f"invalid word length range {word_len_range}")
    capacity = sum(26**n for n in range(lo, hi + 1))
    if capacity < size:
        raise DataError(f"word length range {word_len_range} cannot hold {size} distinct words")
    rng = np.random.default_rng(LEXICON_SEED)
    words: list[str] = []
    seen = set()
    while len(words) < size:
        n = int(rng.integers(lo, hi + 1))
        w = "".join(rng.choice(list(SOURCE_ALPHABET), size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


# ---------------------------------------------------------------------------
# features


_prototype_cache: dict[tuple[str, int], np.ndarray] = {}


def char_prototype(ch: str, feat_dim: int = FEAT_DIM) -> np.ndarray:
    """Unit-norm Gaussian prototype, fixed per character for every corpus."""
    key = (ch, feat_dim)
    proto = _prototype_cache.get(key)
    if proto is None:
        v = np.random.default_rng(stable_seed(PROTOTYPE_SEED, ch, feat_dim)).normal(size=feat_dim)
        proto = v / np.linalg.norm(v)
        _prototype_cache[key] = proto
    return proto


def synth_features(text: str, seed: int, sigma: float = 0.1, feat_dim: int = FEAT_DIM,
                   frames_per_symbol: int = FRAMES_PER_SYMBOL) -> np.ndarray:
    """``(frames_per_symbol * len(text), feat_dim)`` float32 matrix."""
    if not text:
        raise DataError("cannot synthesise features for empty text")
    rng = np.random.default_rng(seed)
    protos = np.stack([char_prototype(ch, feat_dim) for ch in text])
    frames = np.repeat(protos, frames_per_symbol, axis=0)
    if sigma > 0:
        frames = frames + rng.normal(0.0, sigma, size=frames.shape)
    return frames.astype(np.float32)


def write_feature_file(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise DataError("features must be 2-D")
    frames, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames, dim))
        fh.write(features.tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, frames, dim = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    body = raw[_FEATURE_HEADER.size:]
    if len(body) != 4 * frames * dim:
        raise DataError(f"{path}: expected {frames}x{dim} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(frames, dim).astype(np.float32)


def spec_augment(features: np.ndarray, n_time_masks: int, time_width: int, n_feat_masks: int,
                 feat_width: int, seed) -> np.ndarray:
    """Zero ``n_time_masks`` spans of exactly ``time_width`` frames and
    ``n_feat_masks`` bands of ``feat_width`` channels at uniform positions.

    Widths larger than the input are clipped to it.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.array(features, copy=True)
    n, d = out.shape
    tw, fw = min(time_width, n), min(feat_width, d)
    for _ in range(n_time_masks):
        if tw > 0:
            start = int(rng.integers(0, n - tw + 1))
            out[start : start + tw, :] = 0.0
    for _ in range(n_feat_masks):
        if fw > 0:
            start = int(rng.integers(0, d - fw + 1))
            out[:, start : start + fw] = 0.0
    return out


# ---------------------------------------------------------------------------
# examples and manifests


@dataclass
class TripletExample:
    """One ``(features, transcription, translation)`` row."""

    id: str
    transcription: str
    translation: str
    feature_ref: str
    frames: int
    _features: np.ndarray | None = field(default=None, repr=False, compare=False)

    def features(self, base_dir: str | os.PathLike | None = None) -> np.ndarray:
        if self._features is None:
            self._features = load_features(self.feature_ref, self.transcription, base_dir)
            if self._features.shape[0] != self.frames:
                raise DataError(f"{self.id}: manifest says {self.frames} frames, features have {self._features.shape[0]}")
        return self._features


def load_features(feature_ref: str, transcription: str, base_dir=None) -> np.ndarray:
    if feature_ref.startswith("synthetic:"):
        return synth_features(transcription, int(feature_ref.split(":", 1)[1]))
    path = Path(feature_ref)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return read_feature_file(path)


def write_manifest(path, examples: Sequence[TripletExample]) -> None:
    buf = io.StringIO()
    for ex in examples:
        for value in (ex.id, ex.feature_ref, ex.transcription, ex.translation):
            if "\t" in value or "\n" in value:
                raise DataError(f"{ex.id}: fields may not contain tabs or newlines")
        buf.write(f"{ex.id}\t{ex.frames}\t{ex.feature_ref}\t{ex.transcription}\t{ex.translation}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(path, max_frames: int | None = None) -> list[TripletExample]:
    """Read a manifest; examples longer than ``max_frames`` are dropped."""
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        ex_id, frames, ref, z, y = parts
        try:
            n = int(frames)
        except ValueError:
            raise DataError(f"{path}:{lineno}: frames must be an integer") from None
        if not z or not y:
            raise DataError(f"{path}:{lineno}: empty transcription or translation")
        if max_frames is not None and n > max_frames:
            continue
        ex = TripletExample(ex_id, z, y, ref, n)
        if not ref.startswith("synthetic:"):
            ref_path = Path(ref) if Path(ref).is_absolute() else base / ref
            ex.feature_ref = str(ref_path)
        out.append(ex)
    return out


@dataclass
class Corpus:
    train: list[TripletExample]
    dev: list[TripletExample]
    test: list[TripletExample]

    def all(self) -> list[TripletExample]:
        return self.train + self.dev + self.test


def gen_corpus(n_examples: int, min_words: int = 2, max_words: int = 4,
               word_len_range: tuple[int, int] = (2, 5), seed: int = 0) -> Corpus:
    """Deterministic synthetic corpus split 90/5/5; sentences are unique."""
    if n_examples < 1:
        raise DataError("n_examples must be positive")
    if min_words < 1 or max_words < min_words:
        raise DataError(f"invalid word count range ({min_words}, {max_words})")
    lexicon = build_lexicon(tuple(word_len_range))
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    examples = []
    attempts = 0
    while len(examples) < n_examples:
        attempts += 1
        if attempts > 50 * n_examples + 1000:
            raise DataError("could not draw enough distinct sentences; widen the ranges")
        n_words = int(rng.integers(min_words, max_words + 1))
        text = " ".join(lexicon[i] for i in rng.integers(0, len(lexicon), size=n_words))
        if text in seen:
            continue
        seen.add(text)
        ex_id = f"utt{len(examples):06d}"
        ex_seed = stable_seed(seed, ex_id)
        examples.append(TripletExample(ex_id, text, translate_rule(text), f"synthetic:{ex_seed}",
                                       FRAMES_PER_SYMBOL * len(text)))
    n_held = n_examples * 5 // 100
    n_train = n_examples - 2 * n_held
    return Corpus(examples[:n_train], examples[n_train : n_train + n_held], examples[n_train + n_held :])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded model inputs for a set of examples (both decoder layouts)."""

    ids: list[str]
    features: np.ndarray  # (B, frames, feat_dim), zero padded
    feature_lengths: np.ndarray
    input_a: np.ndarray  # (B, U)
    target_a: np.ndarray
    input_b: np.ndarray
    target_b: np.ndarray
    target_mask: np.ndarray  # (B, U) True on real (non-PAD) target positions
    layouts: list = field(repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_target_tokens(self) -> int:
        """Non-pad target tokens across both layouts."""
        return 2 * int(self.target_mask.sum())


def example_cost(ex: TripletExample) -> int:
    """Target tokens for one example in both layouts (|z| + |y| + 2 each)."""
    return 2 * (len(ex.transcription) + len(ex.translation) + 2)


def make_batches(examples: Sequence[TripletExample], max_tokens_per_batch: float) -> list[list[TripletExample]]:
    """Greedy packing after sorting by frame count.

    A batch costs ``n_examples * max(example_cost)`` padded target tokens and
    never exceeds ``max_tokens_per_batch``.
    """
    if not examples:
        return []
    longest = max(example_cost(ex) for ex in examples)
    if longest > max_tokens_per_batch:
        raise DataError(f"an example needs {longest} target tokens, above the budget {max_tokens_per_batch}")
    ordered = sorted(examples, key=lambda ex: (ex.frames, ex.id))
    batches: list[list[TripletExample]] = []
    current: list[TripletExample] = []
    widest = 0
    for ex in ordered:
        cost = example_cost(ex)
        if current and (len(current) + 1) * max(widest, cost) > max_tokens_per_batch:
            batches.append(current)
            current, widest = [], 0
        current.append(ex)
        widest = max(widest, cost)
    if current:
        batches.append(current)
    return batches


def collate(examples: Sequence[TripletExample], vocab: Vocabulary, augment=None, rng=None) -> Batch:
    """Build a :class:`Batch`; ``augment`` is an optional ``features -> features`` callable."""
    from .objective import build_dual_layouts

    feats = []
    layouts = []
    for ex in examples:
        f = ex.features()
        if augment is not None:
            f = augment(f, rng)
        feats.append(f)
        layouts.append(build_dual_layouts(vocab.encode(ex.transcription), vocab.encode(ex.translation), vocab))
    B = len(examples)
    n = max(f.shape[0] for f in feats)
    d = feats[0].shape[1]
    features = np.zeros((B, n, d), dtype=np.float32)
    lengths = np.zeros(B, dtype=np.int64)
    for i, f in enumerate(feats):
        features[i, : f.shape[0]] = f
        lengths[i] = f.shape[0]
    U = max(len(lay.target_a) for lay in layouts)
    arrays = {k: np.full((B, U), PAD, dtype=np.int64) for k in ("input_a", "target_a", "input_b", "target_b")}
    mask = np.zeros((B, U), dtype=bool)
    for i, lay in enumerate(layouts):
        m = len(lay.target_a)
        arrays["input_a"][i, :m] = lay.input_a
        arrays["target_a"][i, :m] = lay.target_a
        arrays["input_b"][i, :m] = lay.input_b
        arrays["target_b"][i, :m] = lay.target_b
        mask[i, :m] = True
    return Batch([ex.id for ex in examples], features, lengths, target_mask=mask, layouts=layouts, **arrays)
