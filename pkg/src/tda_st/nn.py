"""Backbone network: convolutional down-sampler, transformer encoder, and a
shared transformer decoder that scores both output layouts.

Parameters live in a flat ``{name: Tensor}`` dict; forward passes are plain
functions over that dict so the same weights can be scored under different
precisions or snapshots without copying modules around.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class ModelConfig:
    d_model: int = 64
    ffn_dim: int = 128
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    conv_layers: int = 2
    conv_kernel: int = 5
    conv_stride: int = 2
    dropout: float = 0.1
    vocab_size: int = 64
    feat_dim: int = 16
    max_positions: int = 1024
    tie_embeddings: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "ffn_dim", "heads", "enc_layers", "dec_layers", "vocab_size", "feat_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        if self.conv_layers != 2 or self.conv_stride != 2:
            raise ValueError("the down-sampler is fixed at 2 convolutions of stride 2 (factor 4)")
        if self.conv_kernel < 1:
            raise ValueError("conv_kernel must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def downsample_factor(self) -> int:
        return self.conv_stride**self.conv_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "toy": dict(d_model=64, ffn_dim=128, heads=4, enc_layers=2, dec_layers=2, conv_kernel=5, feat_dim=16, dropout=0.1),
    "small": dict(d_model=256, ffn_dim=2048, heads=4, enc_layers=12, dec_layers=6, conv_kernel=5, feat_dim=80, dropout=0.3),
    "medium": dict(d_model=512, ffn_dim=2048, heads=8, enc_layers=12, dec_layers=6, conv_kernel=5, feat_dim=80, dropout=0.3),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def conv_out_length(n, kernel: int, stride: int = 2):
    """Output length of one padded convolution (pad = kernel // 2)."""
    pad = kernel // 2
    return (np.asarray(n) + 2 * pad - kernel) // stride + 1


def subsampled_length(n, config: ModelConfig):
    out = np.asarray(n)
    for _ in range(config.conv_layers):
        out = conv_out_length(out, config.conv_kernel, config.conv_stride)
    return out


def sinusoidal_positions(n: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : (d - d // 2)])
    return pe.astype(dtype)


# ---------------------------------------------------------------------------
# parameters


def init_parameters(config: ModelConfig, seed: int = 0, dtype=None) -> dict[str, Tensor]:
    """Create the full parameter set for ``config`` (deterministic in ``seed``)."""
    rng = np.random.default_rng(seed)
    dtype = dtype or T.get_dtype()
    d, f = config.d_model, config.ffn_dim
    shapes: dict[str, tuple] = {}

    def linear(prefix, n_in, n_out):
        shapes[f"{prefix}.weight"] = ("xavier", (n_in, n_out))
        shapes[f"{prefix}.bias"] = ("zeros", (n_out,))

    def norm(prefix):
        shapes[f"{prefix}.gain"] = ("ones", (d,))
        shapes[f"{prefix}.bias"] = ("zeros", (d,))

    c_in = config.feat_dim
    for i in range(config.conv_layers):
        linear(f"subsample.conv{i}", config.conv_kernel * c_in, d)
        c_in = d
    for i in range(config.enc_layers):
        p = f"encoder.layers.{i}"
        norm(f"{p}.attn_norm")
        linear(f"{p}.attn.in_proj", d, 3 * d)
        linear(f"{p}.attn.out_proj", d, d)
        norm(f"{p}.ffn_norm")
        linear(f"{p}.ffn.fc1", d, f)
        linear(f"{p}.ffn.fc2", f, d)
    norm("encoder.final_norm")
    shapes["decoder.embed"] = ("embed", (config.vocab_size, d))
    for i in range(config.dec_layers):
        p = f"decoder.layers.{i}"
        norm(f"{p}.self_norm")
        linear(f"{p}.self_attn.in_proj", d, 3 * d)
        linear(f"{p}.self_attn.out_proj", d, d)
        norm(f"{p}.cross_norm")
        linear(f"{p}.cross_attn.in_proj", d, 3 * d)
        linear(f"{p}.cross_attn.out_proj", d, d)
        norm(f"{p}.ffn_norm")
        linear(f"{p}.ffn.fc1", d, f)
        linear(f"{p}.ffn.fc2", f, d)
    norm("decoder.final_norm")
    if not config.tie_embeddings:
        shapes["decoder.output_proj"] = ("xavier", (d, config.vocab_size))

    params = {}
    for name, (kind, shape) in shapes.items():
        if kind == "xavier":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif kind == "embed":
            value = rng.normal(0.0, d**-0.5, size=shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, dtype=dtype, name=name)
    return params


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def _norm(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def conv_subsample(
    features: Tensor,
    frame_mask: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
) -> tuple[Tensor, np.ndarray]:
    """Two strided 1-D convolutions (GELU after each); returns hidden states and the new pad mask.

    ``frame_mask`` is ``(batch, frames)`` with True on padding.  Padding frames
    are zeroed before every convolution so their content never leaks into
    valid outputs.
    """
    k, s = config.conv_kernel, config.conv_stride
    pad = k // 2
    x = features
    mask = frame_mask
    lengths = (~mask).sum(axis=1)
    for i in range(config.conv_layers):
        x = T.masked_fill(x, mask[:, :, None], 0.0)
        n = x.shape[1]
        n_out = int(conv_out_length(n, k, s))
        xp = T.pad_axis(x, 1, pad, pad)
        span = s * (n_out - 1) + 1
        windows = T.concat([xp[:, j : j + span : s, :] for j in range(k)], axis=-1)
        x = T.gelu(linear(windows, params, f"subsample.conv{i}"))
        lengths = conv_out_length(lengths, k, s)
        mask = np.arange(n_out)[None, :] >= lengths[:, None]
    x = T.masked_fill(x, mask[:, :, None], 0.0)
    return x, mask


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    mask: np.ndarray | None,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
    *,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads.

    ``mask`` is boolean, True where attention is disallowed, broadcastable to
    ``(batch, q_len, k_len)``.  Returns the projected output, and the
    ``(batch, heads, q_len, k_len)`` weights when ``return_weights`` is set.
    """
    B, Tq, d = query.shape
    Tk = key.shape[1]
    if key.shape != value.shape or key.shape[0] != B or key.shape[2] != d:
        raise T.ShapeError(f"attention shape mismatch: q{query.shape} k{key.shape} v{value.shape}")
    dh = d // heads
    w = params[f"{prefix}.in_proj.weight"]
    b = params[f"{prefix}.in_proj.bias"]
    if query is key and key is value:
        qkv = T.matmul(query, w) + b
        q, k, v = qkv[:, :, :d], qkv[:, :, d : 2 * d], qkv[:, :, 2 * d :]
    else:
        q = T.matmul(query, w[:, :d]) + b[:d]
        if key is value:
            kv = T.matmul(key, w[:, d:]) + b[d:]
            k, v = kv[:, :, :d], kv[:, :, d:]
        else:
            k = T.matmul(key, w[:, d : 2 * d]) + b[d : 2 * d]
            v = T.matmul(value, w[:, 2 * d :]) + b[2 * d :]

    def split(t, n):
        return T.transpose(T.reshape(t, (B, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q, Tq), split(k, Tk), split(v, Tk)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[:, None, :]
        scores = T.masked_fill(scores, mask[:, None, :, :], NEG_INF)
    weights = T.softmax(scores, axis=-1)
    attn = T.dropout(weights, dropout_rate, rng, train)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, Tq, d))
    out = linear(ctx, params, f"{prefix}.out_proj")
    if return_weights:
        return out, weights
    return out


def _ffn(x: Tensor, params, prefix: str, rate: float, rng, train: bool) -> Tensor:
    h = T.gelu(linear(x, params, f"{prefix}.fc1"))
    h = T.dropout(h, rate, rng, train)
    return linear(h, params, f"{prefix}.fc2")


# ---------------------------------------------------------------------------
# model


@dataclass
class EncoderOutput:
    memory: Tensor
    mask: np.ndarray  # (batch, frames') True on padding

    @property
    def lengths(self) -> np.ndarray:
        return (~self.mask).sum(axis=1)


class Seq2SeqModel:
    """Conv + transformer encoder, transformer decoder with tied output layer."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0, dtype=None):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed, dtype)
        self.dtype = next(iter(self.params.values())).dtype
        self._pe = sinusoidal_positions(config.max_positions, config.d_model, self.dtype)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True, prefixes: tuple[str, ...] = ()) -> list[str]:
        """Copy arrays into the parameters; returns the names that were loaded.

        With ``prefixes`` only names starting with one of them are copied.
        """
        loaded = []
        if strict and not prefixes:
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if prefixes and not name.startswith(prefixes):
                continue
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            loaded.append(name)
        return loaded

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def encode(self, features, lengths=None, *, train: bool = False, rng=None) -> EncoderOutput:
        """Encode ``(batch, frames, feat_dim)`` features (a single ``(frames, feat_dim)`` is accepted)."""
        cfg = self.config
        feats = np.asarray(features.data if isinstance(features, Tensor) else features)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.ndim != 3 or feats.shape[2] != cfg.feat_dim:
            raise T.ShapeError(f"features must be (batch, frames, {cfg.feat_dim}), got {feats.shape}")
        B, n = feats.shape[:2]
        if n == 0:
            raise ValueError("cannot encode zero-length input")
        lengths = np.full(B, n) if lengths is None else np.asarray(lengths)
        if np.any(lengths < 1):
            raise ValueError("cannot encode zero-length input")
        if np.any(lengths > n):
            raise ValueError("feature_length exceeds the padded frame count")
        if np.any(lengths < cfg.conv_kernel):
            raise ValueError(f"input shorter than the convolution kernel ({cfg.conv_kernel} frames)")
        frame_mask = np.arange(n)[None, :] >= lengths[:, None]
        x, mask = conv_subsample(Tensor(feats, dtype=self.dtype), frame_mask, self.params, cfg)
        n_out = x.shape[1]
        if n_out > cfg.max_positions:
            raise ValueError(f"{n_out} positions exceed max_positions={cfg.max_positions}")
        x = x + Tensor(self._pe[:n_out], dtype=self.dtype)
        x = T.dropout(x, cfg.dropout, rng, train)
        attn_mask = mask[:, None, :]
        for i in range(cfg.enc_layers):
            p = f"encoder.layers.{i}"
            h = _norm(x, self.params, f"{p}.attn_norm")
            h = multi_head_attention(h, h, h, attn_mask, self.params, f"{p}.attn", cfg.heads,
                                     dropout_rate=cfg.dropout, rng=rng, train=train)
            x = x + T.dropout(h, cfg.dropout, rng, train)
            h = _ffn(_norm(x, self.params, f"{p}.ffn_norm"), self.params, f"{p}.ffn", cfg.dropout, rng, train)
            x = x + T.dropout(h, cfg.dropout, rng, train)
        x = _norm(x, self.params, "encoder.final_norm")
        return EncoderOutput(x, mask)

    def decode_teacher_forced(
        self,
        memory: Tensor,
        memory_mask: np.ndarray,
        tokens,
        token_pad_mask: np.ndarray | None = None,
        *,
        train: bool = False,
        rng=None,
    ) -> Tensor:
        """Per-position next-token log-probabilities ``(batch, len, vocab)``.

        Position ``t`` only sees ``tokens[:, :t+1]`` (causal mask) and the memory.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id outside vocabulary of size {cfg.vocab_size}")
        B, U = tokens.shape
        if U > cfg.max_positions:
            raise ValueError(f"{U} positions exceed max_positions={cfg.max_positions}")
        if memory.shape[0] != B:
            raise T.ShapeError(f"memory batch {memory.shape[0]} != token batch {B}")
        embed = self.params["decoder.embed"]
        x = T.scale(T.take_rows(embed, tokens), math.sqrt(cfg.d_model))
        x = x + Tensor(self._pe[:U], dtype=self.dtype)
        x = T.dropout(x, cfg.dropout, rng, train)
        causal = np.triu(np.ones((U, U), dtype=bool), k=1)[None]
        self_mask = causal if token_pad_mask is None else causal | np.asarray(token_pad_mask, bool)[:, None, :]
        cross_mask = np.asarray(memory_mask, bool)[:, None, :]
        for i in range(cfg.dec_layers):
            p = f"decoder.layers.{i}"
            h = _norm(x, self.params, f"{p}.self_norm")
            h = multi_head_attention(h, h, h, self_mask, self.params, f"{p}.self_attn", cfg.heads,
                                     dropout_rate=cfg.dropout, rng=rng, train=train)
            x = x + T.dropout(h, cfg.dropout, rng, train)
            h = _norm(x, self.params, f"{p}.cross_norm")
            h = multi_head_attention(h, memory, memory, cross_mask, self.params, f"{p}.cross_attn", cfg.heads,
                                     dropout_rate=cfg.dropout, rng=rng, train=train)
            x = x + T.dropout(h, cfg.dropout, rng, train)
            h = _ffn(_norm(x, self.params, f"{p}.ffn_norm"), self.params, f"{p}.ffn", cfg.dropout, rng, train)
            x = x + T.dropout(h, cfg.dropout, rng, train)
        x = _norm(x, self.params, "decoder.final_norm")
        if cfg.tie_embeddings:
            logits = T.matmul(x, T.transpose(embed))
        else:
            logits = T.matmul(x, self.params["decoder.output_proj"])
        return T.log_softmax(logits, axis=-1)

    def next_token_logprobs(self, memory: Tensor, memory_mask: np.ndarray, prefixes) -> np.ndarray:
        """Distribution over the next token for each prefix row (inference only)."""
        with T.no_grad():
            lp = self.decode_teacher_forced(memory, memory_mask, prefixes)
        return lp.data[:, -1, :]
