"""Optimisation loop: Adam with linear warm-up and inverse-sqrt decay, dev
evaluation, best-k checkpoint retention and checkpoint averaging."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, TripletExample, Vocabulary, collate, make_batches, spec_augment
from .nn import ModelConfig, Seq2SeqModel
from .objective import LossBreakdown, score_batch, score_batch_asr

logger = logging.getLogger(__name__)

MODES = ("pretrain-asr", "train-tda", "train-mle-only")
CHECKPOINT_MAGIC = b"TDACKPT1"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: Path | None):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointVersionError(ValueError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 0.002
    warmup_steps: int = 500
    label_smoothing: float = 0.1
    dropout: float = 0.1
    lam: float = 1.0
    max_steps: int = 5000
    max_epochs: int = 0  # 0 = unbounded
    seed: int = 0
    checkpoint_every: int = 250
    keep_best_k: int = 10
    grad_accum: int = 1
    mode: str = "train-tda"
    max_tokens: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    time_masks: int = 1
    time_mask_width: int = 3
    feat_masks: int = 1
    feat_mask_width: int = 2
    best_metric: str = "loss"  # or "bleu"
    max_frames: int = 300

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.max_steps < 0 or self.max_epochs < 0:
            raise ValueError("max_steps / max_epochs must be non-negative")
        if self.checkpoint_every < 1 or self.keep_best_k < 1 or self.grad_accum < 1:
            raise ValueError("checkpoint_every, keep_best_k and grad_accum must be >= 1")
        if self.best_metric not in ("loss", "bleu"):
            raise ValueError("best_metric must be 'loss' or 'bleu'")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam hyper-parameters")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.mode != "train-tda" else self.lam

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, peak_lr: float, warmup: int) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> None:
    """Bias-corrected Adam update, in place on ``params[name].data`` and ``state``.

    Raises :class:`NonFiniteGradient` before touching anything if a gradient
    holds NaN/Inf.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    step: int
    dev_metric: float
    params: dict[str, np.ndarray]
    optimizer: AdamState | None = None
    extra: dict = field(default_factory=dict)


def _write_blob(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "step": ckpt.step,
        "dev_metric": ckpt.dev_metric,
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer else None,
        "extra": ckpt.extra,
    }
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for name in sorted(ckpt.params):
            _write_blob(fh, name, ckpt.params[name])
        if ckpt.optimizer:
            for name in sorted(ckpt.optimizer.m):
                _write_blob(fh, f"adam.m.{name}", ckpt.optimizer.m[name])
                _write_blob(fh, f"adam.v.{name}", ckpt.optimizer.v[name])
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 16
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    params, m, v = {}, {}, {}
    while off < len(raw):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            params[name] = arr
    opt = AdamState(meta["optimizer_step"], m, v) if meta.get("optimizer_step") is not None else None
    tc = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    return Checkpoint(ModelConfig.from_dict(meta["model_config"]), tc, meta["step"], meta["dev_metric"],
                      params, opt, meta.get("extra", {}))


def average_checkpoints(checkpoints: Sequence[Checkpoint]) -> dict[str, np.ndarray]:
    """Arithmetic mean of each parameter across snapshots (optimizer state dropped)."""
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    first = checkpoints[0]
    for c in checkpoints[1:]:
        if c.model_config != first.model_config or set(c.params) != set(first.params):
            raise ValueError("cannot average checkpoints with different model configs")
    out = {}
    for name in first.params:
        acc = np.zeros(first.params[name].shape, dtype=np.float64)
        for c in checkpoints:
            acc += c.params[name]
        out[name] = (acc / len(checkpoints)).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Seq2SeqModel
    metric_log: list[tuple]
    best: list[tuple[float, int, Path | None]]
    run_dir: Path | None
    steps_done: int


def format_metric_line(step: int, br: LossBreakdown) -> str:
    return f"{step}\t{br.nll_a:.6f}\t{br.nll_b:.6f}\t{br.kl_fwd:.6f}\t{br.kl_bwd:.6f}\t{br.total:.6f}"


def read_metric_log(path) -> list[tuple[int, float, float, float, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        rows.append((int(parts[0]), *map(float, parts[1:])))
    return rows


def evaluate_loss(model: Seq2SeqModel, batches: Sequence[Batch], cfg: TrainConfig) -> LossBreakdown:
    """Token-mean loss terms over ``batches`` (eval mode, no label smoothing)."""
    sums = np.zeros(5)
    n = 0
    lam = cfg.effective_lambda
    with T.no_grad():
        for b in batches:
            if cfg.mode == "pretrain-asr":
                br = score_batch_asr(model, b, 0.0, normalizer=1.0).as_floats()
                sums += [br.nll_a, 0, 0, 0, br.total]
            else:
                br = score_batch(model, b, lam, 0.0, normalizer=1.0).as_floats()
                sums += [br.nll_a, br.nll_b, br.kl_fwd, br.kl_bwd, br.total]
            n += br.n_tokens
    s = sums / max(n, 1)
    return LossBreakdown(s[0], s[1], s[2], s[3], lam, s[4], n)


def _batches_for(examples, vocab, budget) -> list[Batch]:
    return [collate(group, vocab) for group in make_batches(examples, budget)]


def train(
    config: TrainConfig,
    model: Seq2SeqModel,
    train_examples: Sequence[TripletExample],
    dev_examples: Sequence[TripletExample],
    vocab: Vocabulary,
    run_dir=None,
    dev_scorer: Callable[[Seq2SeqModel], float] | None = None,
    optimizer: AdamState | None = None,
) -> TrainResult:
    """Run ``config.max_steps`` optimizer updates (or ``max_epochs`` passes).

    Writes, under ``run_dir`` when given: ``metrics.tsv`` (one line per dev
    evaluation), ``steps.tsv`` (one line per update), best-k checkpoints under
    ``checkpoints/``, ``last.ckpt`` and ``averaged.ckpt``.

    ``dev_scorer`` returns a higher-is-better dev score and is only used when
    ``best_metric == "bleu"``.
    """
    cfg = config
    model.config.dropout = cfg.dropout
    rng = np.random.default_rng(cfg.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    train_examples = [ex for ex in train_examples if ex.frames <= cfg.max_frames]
    dev_examples = [ex for ex in dev_examples if ex.frames <= cfg.max_frames]
    groups = make_batches(train_examples, cfg.max_tokens)
    dev_batches = _batches_for(dev_examples, vocab, cfg.max_tokens)
    opt = optimizer or AdamState()
    lam = cfg.effective_lambda
    kl_in_graph = cfg.mode == "train-tda"

    def augment(f, r):
        return spec_augment(f, cfg.time_masks, cfg.time_mask_width, cfg.feat_masks, cfg.feat_mask_width, r)

    use_aug = (cfg.time_masks and cfg.time_mask_width) or (cfg.feat_masks and cfg.feat_mask_width)

    metric_log: list[tuple] = []
    best: list[tuple[float, int, Path | None]] = []
    metrics_fh = open(run_dir / "metrics.tsv", "w", encoding="utf-8") if run_dir else None
    steps_fh = open(run_dir / "steps.tsv", "w", encoding="utf-8") if run_dir else None
    last_good: Path | None = None

    def snapshot(step: int, metric: float) -> Checkpoint:
        return Checkpoint(model.config, cfg, step, metric, model.state_dict(), opt)

    def evaluate(step: int) -> None:
        nonlocal last_good, best
        br = evaluate_loss(model, dev_batches, cfg) if dev_batches else LossBreakdown(0, 0, 0, 0, lam, 0)
        row = (step, br.nll_a, br.nll_b, br.kl_fwd, br.kl_bwd, br.total)
        metric_log.append(row)
        if metrics_fh:
            metrics_fh.write(format_metric_line(step, br) + "\n")
            metrics_fh.flush()
        if not math.isfinite(br.total):
            raise TrainingDiverged(step, last_good)
        if cfg.best_metric == "bleu" and dev_scorer is not None:
            key = -float(dev_scorer(model))
        else:
            key = br.total
        logger.info("step %d dev %s", step, format_metric_line(step, br))
        if run_dir is None:
            best.append((key, step, None))
            best = sorted(best)[: cfg.keep_best_k]
            return
        ckpt = snapshot(step, key)
        save_checkpoint(run_dir / "last.ckpt", ckpt)
        last_good = run_dir / "last.ckpt"
        if step == 0:
            return
        path = ckpt_dir / f"step_{step:07d}.ckpt"
        candidates = sorted(best + [(key, step, path)], key=lambda t: (t[0], t[1]))
        keep, drop = candidates[: cfg.keep_best_k], candidates[cfg.keep_best_k :]
        if any(entry[1] == step for entry in keep):
            save_checkpoint(path, ckpt)
        for entry in drop:
            if entry[2] is not None and entry[2].exists():
                entry[2].unlink()
        best = keep

    step = 0
    try:
        evaluate(0)
        epoch = 0
        order: list[int] = []
        done = cfg.max_steps == 0 and cfg.max_epochs == 0
        while not done:
            micro: list[list[TripletExample]] = []
            for _ in range(cfg.grad_accum):
                if not order:
                    if cfg.max_epochs and epoch >= cfg.max_epochs:
                        break
                    order = list(rng.permutation(len(groups)))
                    epoch += 1
                micro.append(groups[order.pop(0)])
            if not micro:
                break
            batches = [collate(g, vocab, augment if use_aug else None, rng) for g in micro]
            model.zero_grad()
            if cfg.mode == "pretrain-asr":
                norm = float(sum(sum(lay.z_span_a[1] + 1 for lay in b.layouts) for b in batches))
            else:
                norm = float(sum(b.n_target_tokens for b in batches))
            acc = np.zeros(5)
            for b in batches:
                with T.Tape() as tape:
                    if cfg.mode == "pretrain-asr":
                        br = score_batch_asr(model, b, cfg.label_smoothing, train=True, rng=rng, normalizer=norm)
                    else:
                        br = score_batch(model, b, lam, cfg.label_smoothing, train=True, rng=rng,
                                         kl_in_graph=kl_in_graph, normalizer=norm)
                    tape.backward(br.total)
                f = br.as_floats()
                acc += [f.nll_a, f.nll_b, f.kl_fwd, f.kl_bwd, f.total]
            step += 1
            if not math.isfinite(acc[4]):
                raise TrainingDiverged(step, last_good)
            lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps)
            try:
                adam_step(model.params, {k: p.grad for k, p in model.params.items()}, opt, lr,
                          cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            except NonFiniteGradient:
                raise TrainingDiverged(step, last_good) from None
            if steps_fh:
                steps_fh.write(f"{step}\t{lr:.8g}\t" + "\t".join(f"{x:.6f}" for x in acc) + "\n")
            if step % cfg.checkpoint_every == 0:
                evaluate(step)
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
        if not metric_log or metric_log[-1][0] != step:
            evaluate(step)
    except T.NonFiniteError:
        raise TrainingDiverged(step, last_good) from None
    finally:
        if metrics_fh:
            metrics_fh.close()
        if steps_fh:
            steps_fh.close()
        model.zero_grad()

    if run_dir is not None:
        chosen = [load_checkpoint(p) for _, _, p in best if p is not None] or [load_checkpoint(run_dir / "last.ckpt")]
        avg = average_checkpoints(chosen)
        save_checkpoint(run_dir / "averaged.ckpt",
                        Checkpoint(model.config, cfg, step, float("nan"), avg, None,
                                   {"averaged_steps": [c.step for c in chosen]}))
        try:
            from .plotting import plot_metric_log

            plot_metric_log(metric_log, run_dir / "metrics.png", title=f"{cfg.mode} (lambda={lam:g})")
        except ImportError:  # pragma: no cover - matplotlib missing
            logger.warning("matplotlib unavailable; skipping metrics figure")
    return TrainResult(model, metric_log, best, run_dir, step)


def model_from_checkpoint(ckpt: Checkpoint) -> Seq2SeqModel:
    model = Seq2SeqModel(ckpt.model_config, seed=0, dtype=np.float32)
    model.load_state_dict(ckpt.params)
    return model


def init_from_checkpoint(model: Seq2SeqModel, ckpt: Checkpoint, include_decoder: bool = False) -> list[str]:
    """Copy pre-trained encoder (and optionally decoder) weights into ``model``."""
    prefixes = ("subsample.", "encoder.") + (("decoder.",) if include_decoder else ())
    return model.load_state_dict(ckpt.params, strict=False, prefixes=prefixes)
