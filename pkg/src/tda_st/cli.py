"""``tda-st`` command line.

Exit codes: 0 success, 2 invalid arguments or configuration, 3 I/O failure,
4 training diverged, 5 checkpoint version mismatch.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as C
from .data import DataError, Vocabulary, gen_corpus, read_manifest, write_feature_file, write_manifest
from .decoding import DecodeRequest, FullDecodeResult, decode, format_decode_line, parse_decode_line
from .metrics import EvalReport, agreement_report, bleu, corpus_wer, write_report
from .nn import Seq2SeqModel
from .trainer import (
    Checkpoint,
    CheckpointVersionError,
    TrainingDiverged,
    average_checkpoints,
    init_from_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

logger = logging.getLogger("tda_st")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_VERSION = 0, 2, 3, 4, 5
PATH_CHOICES = {"st": "ST", "asr": "ASR", "full-st-bt": "FULL-ST-BT", "full-asr-mt": "FULL-ASR-MT"}
RESOLVED_NAME = "config.resolved"


class UsageError(Exception):
    """Bad arguments or configuration (exit 2)."""


class OutputError(Exception):
    """Output location unusable (exit 3)."""


# ---------------------------------------------------------------------------
# helpers


def _env_seed() -> int | None:
    raw = os.environ.get("TDA_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TDA_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(cli_seed: int | None, values: dict) -> int:
    if cli_seed is not None:
        return cli_seed
    if "seed" in values:
        return int(values["seed"])
    env = _env_seed()
    return env if env is not None else 0


def _prepare_out_dir(path: Path, force: bool) -> Path:
    if path.exists():
        if not force:
            raise OutputError(f"{path} already exists (use --force to overwrite)")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    try:
        path.mkdir(parents=True)
    except OSError as exc:
        raise OutputError(f"cannot create {path}: {exc}") from None
    return path


def _check_output_file(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise OutputError(f"{path} already exists (use --force to overwrite)")
    if not path.parent.exists():
        raise OutputError(f"output directory {path.parent} does not exist")
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        out[key.strip()] = value
    return out


def _load_vocab(arg, manifest: Path) -> Vocabulary:
    path = Path(arg) if arg else manifest.parent / "vocab.txt"
    return Vocabulary.load(_require(path, "vocabulary"))


def _load_ckpt(path) -> Checkpoint:
    return load_checkpoint(_require(Path(path), "checkpoint"))


def _write_plain_config(path: Path, values: dict) -> None:
    C.write_resolved(path, values)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.n < 3:
        raise UsageError("--n must be at least 3")
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    out = _prepare_out_dir(Path(args.out), args.force)
    try:
        corpus = gen_corpus(args.n, args.min_words, args.max_words, (args.min_word_len, args.max_word_len), seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.write_features:
        feat_dir = out / "features"
        feat_dir.mkdir()
        for ex in corpus.all():
            rel = f"features/{ex.id}.feat"
            write_feature_file(out / rel, ex.features())
            ex.feature_ref = rel
    write_manifest(out / "train.tsv", corpus.train)
    write_manifest(out / "dev.tsv", corpus.dev)
    write_manifest(out / "test.tsv", corpus.test)
    vocab = Vocabulary.build([t for ex in corpus.all() for t in (ex.transcription, ex.translation)])
    vocab.save(out / "vocab.txt")
    _write_plain_config(out / RESOLVED_NAME, {
        "n": args.n, "seed": seed, "min_words": args.min_words, "max_words": args.max_words,
        "min_word_len": args.min_word_len, "max_word_len": args.max_word_len,
        "write_features": bool(args.write_features),
    })
    print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} examples to {out}")
    return EXIT_OK


def _run_values(args, forced_mode: str | None = None) -> dict:
    overrides = _parse_sets(getattr(args, "set", None))
    for key, attr in (("lam", "lam"), ("mode", "mode"), ("max_steps", "max_steps"),
                      ("data_dir", "data"), ("init_from", "init_from"), ("preset", "preset")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value if isinstance(value, str) else value
    if getattr(args, "init_decoder", False):
        overrides["init_decoder"] = True
    values = C.load_run_config(args.config, overrides)
    values["seed"] = _resolve_seed(args.seed, values)
    if forced_mode:
        if values.get("mode", forced_mode) != forced_mode:
            raise UsageError(f"this command only runs mode {forced_mode}")
        values["mode"] = forced_mode
    return values


def _load_corpus(values: dict, max_frames: int):
    if "data_dir" not in values:
        raise UsageError("no corpus given (use --data DIR or data_dir= in the config)")
    root = _require(Path(values["data_dir"]), "corpus directory")
    train_m = _require(root / "train.tsv", "training manifest")
    dev_m = _require(root / "dev.tsv", "dev manifest")
    vocab = Vocabulary.load(_require(root / "vocab.txt", "vocabulary"))
    return read_manifest(train_m, max_frames), read_manifest(dev_m, max_frames), vocab


def _resolved_train_values(values: dict, model_cfg, train_cfg) -> dict:
    resolved = {k: v for k, v in values.items() if k in C.KNOWN_KEYS}
    resolved.update({k: v for k, v in asdict(model_cfg).items() if k not in ("vocab_size", "dropout")})
    resolved.update(asdict(train_cfg))
    resolved.setdefault("preset", "toy")
    resolved.setdefault("param_seed", train_cfg.seed)
    return resolved


def cmd_train(args, forced_mode: str | None = None) -> int:
    values = _run_values(args, forced_mode)
    train_cfg = C.train_config(values)
    train_ex, dev_ex, vocab = _load_corpus(values, train_cfg.max_frames)
    model_cfg = C.model_config(values, len(vocab), train_cfg.dropout)
    model = Seq2SeqModel(model_cfg, seed=int(values.get("param_seed", train_cfg.seed)))
    if values.get("init_from"):
        ckpt = _load_ckpt(values["init_from"])
        try:
            loaded = init_from_checkpoint(model, ckpt, bool(values.get("init_decoder", False)))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"--init-from: {exc}") from None
        logger.info("initialized %d tensors from %s", len(loaded), values["init_from"])
    out = _prepare_out_dir(Path(args.out), args.force)
    C.write_resolved(out / RESOLVED_NAME, _resolved_train_values(values, model_cfg, train_cfg))
    result = train(train_cfg, model, train_ex, dev_ex, vocab, run_dir=out)
    vocab.save(out / "vocab.txt")
    final = result.metric_log[-1]
    print(f"trained {result.steps_done} steps; final dev total {final[5]:.6f}; outputs in {out}")
    return EXIT_OK


def cmd_pretrain_asr(args) -> int:
    return cmd_train(args, forced_mode="pretrain-asr")


def cmd_decode(args) -> int:
    manifest = _require(Path(args.manifest), "manifest")
    vocab = _load_vocab(args.vocab, manifest)
    ckpt = _load_ckpt(args.checkpoint)
    if ckpt.model_config.vocab_size != len(vocab):
        raise UsageError(f"vocabulary has {len(vocab)} entries but the checkpoint expects "
                         f"{ckpt.model_config.vocab_size}")
    model = model_from_checkpoint(ckpt)
    try:
        request = DecodeRequest(PATH_CHOICES[args.path], args.beam, args.max_len, not args.no_length_normalize)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _check_output_file(Path(args.out), args.force)
    lines = []
    for ex in read_manifest(manifest):
        result = decode(model, ex.features(), request)
        if isinstance(result, FullDecodeResult) and result.missing_interior_tag:
            logger.warning("%s: no interior tag in full decode", ex.id)
        lines.append(format_decode_line(ex.id, request.path, result, vocab))
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    C.write_resolved(Path(str(out) + ".config"), {
        "checkpoint": args.checkpoint, "manifest": str(manifest), "path": request.path,
        "beam_size": request.beam_size, "max_len": request.max_len or "auto",
        "length_normalize": request.length_normalize,
    })
    print(f"decoded {len(lines)} utterances to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    decoded = _require(Path(args.decoded), "decode output")
    manifest = _require(Path(args.manifest), "manifest")
    refs = {ex.id: ex for ex in read_manifest(manifest)}
    out = _check_output_file(Path(args.out), args.force)
    st_refs, st_hyps, asr_refs, asr_hyps, records = [], [], [], [], []
    for line in decoded.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        try:
            ex_id, path, score, texts = parse_decode_line(line)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        if ex_id not in refs:
            raise DataError(f"{ex_id}: not present in {manifest}")
        ex = refs[ex_id]
        if path == "ST":
            translation, transcription = texts[0], None
        elif path == "ASR":
            translation, transcription = None, texts[0]
        elif path == "FULL-ST-BT":
            translation, transcription = texts[0], texts[1] if len(texts) > 1 else ""
        elif path == "FULL-ASR-MT":
            transcription, translation = texts[0], texts[1] if len(texts) > 1 else ""
        else:
            raise DataError(f"{ex_id}: unknown path {path!r}")
        rec = {"id": ex_id, "path": path, "score": score}
        if translation is not None:
            st_refs.append(ex.translation)
            st_hyps.append(translation)
            rec["translation"] = translation
        if transcription is not None:
            asr_refs.append(ex.transcription)
            asr_hyps.append(transcription)
            rec["transcription"] = transcription
        records.append(rec)
    if not records:
        raise DataError(f"{decoded}: no decode lines")
    report = EvalReport(n_examples=len(records))
    if st_hyps:
        report.bleu = bleu(st_refs, st_hyps)
    if asr_hyps:
        report.wer = corpus_wer(asr_refs, asr_hyps)
    cols = ["id", "path", "score"] + [c for c in ("translation", "transcription") if c in records[0]]
    report.records = [{c: r.get(c, "") for c in cols} for r in records]
    write_report(out, report)
    summary = ", ".join(f"{k}={v:.4f}" for k, v in (("BLEU", report.bleu), ("WER", report.wer)) if v is not None)
    print(f"{summary} over {len(records)} utterances; report in {out}")
    return EXIT_OK


def cmd_agreement(args) -> int:
    manifest = _require(Path(args.manifest), "manifest")
    vocab = _load_vocab(args.vocab, manifest)
    model = model_from_checkpoint(_load_ckpt(args.checkpoint))
    out = _check_output_file(Path(args.out), args.force)
    report = agreement_report(model, read_manifest(manifest), vocab, max_tokens=args.max_tokens)
    write_report(out, report)
    if not args.no_figure:
        from .plotting import plot_agreement

        plot_agreement(report, out.with_suffix(".png"))
    print(f"kl_fwd={report.kl_fwd:.6f} kl_bwd={report.kl_bwd:.6f} nll_gap={report.nll_gap:.6f}; report in {out}")
    return EXIT_OK


def cmd_average(args) -> int:
    ckpts = [_load_ckpt(p) for p in args.checkpoints]
    out = _check_output_file(Path(args.out), args.force)
    try:
        params = average_checkpoints(ckpts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    first = ckpts[0]
    save_checkpoint(out, Checkpoint(first.model_config, first.train_config, max(c.step for c in ckpts),
                                    float("nan"), params, None,
                                    {"averaged_from": [str(p) for p in args.checkpoints]}))
    print(f"averaged {len(ckpts)} checkpoints into {out}")
    return EXIT_OK


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_experiment(args) -> int:
    from .data import Corpus
    from .experiment import run_sweep

    values = _run_values(args)
    values.pop("seed", None)
    values["mode"] = "train-tda"
    train_cfg = C.train_config(values)
    train_ex, dev_ex, vocab = _load_corpus(values, train_cfg.max_frames)
    test_m = _require(Path(values["data_dir"]) / "test.tsv", "test manifest")
    corpus = Corpus(train_ex, dev_ex, read_manifest(test_m))
    model_cfg = C.model_config(values, len(vocab), train_cfg.dropout)
    out = _prepare_out_dir(Path(args.out), args.force)
    resolved = _resolved_train_values(values, model_cfg, train_cfg)
    for key in ("seed", "lam", "param_seed"):
        resolved.pop(key, None)
    C.write_resolved(out / RESOLVED_NAME, resolved)
    (out / "sweep.txt").write_text(
        f"seeds={','.join(map(str, args.seeds))}\nlambdas={','.join(f'{x:g}' for x in args.lambdas)}\n"
        f"beam_size={args.beam}\npretrain_steps={args.pretrain_steps}\n", encoding="utf-8")
    rows = run_sweep(model_cfg, train_cfg, corpus, vocab, out, args.seeds, args.lambdas, args.beam,
                     values.get("max_len"), bool(values.get("length_normalize", True)), args.pretrain_steps)
    for r in rows:
        print(f"seed={r.seed} lambda={r.lam:g} dev_kl={r.dev_kl:.6f} bleu={r.test_bleu:.2f} wer={r.test_wer:.4f} "
              f"train_seconds={r.train_seconds:.1f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_options(p: argparse.ArgumentParser, with_mode: bool) -> None:
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--data", help="corpus directory written by gen-data")
    p.add_argument("--out", required=True, help="run directory (must not exist unless --force)")
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.add_argument("--seed", type=int, help="training seed (falls back to the config, then TDA_SEED)")
    p.add_argument("--max-steps", type=int, dest="max_steps", help="optimizer updates")
    p.add_argument("--preset", help="model size preset: toy, small or medium")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    if with_mode:
        p.add_argument("--mode", choices=("train-tda", "train-mle-only", "pretrain-asr"), help="training mode")
        p.add_argument("--lambda", type=float, dest="lam", help="agreement weight")
        p.add_argument("--init-from", dest="init_from", help="checkpoint whose encoder initializes the model")
        p.add_argument("--init-decoder", action="store_true", help="with --init-from, also copy decoder weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tda-st", description="Dual-path speech translation toolkit.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic triplet corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=2000, help="number of examples (split 90/5/5)")
    p.add_argument("--seed", type=int, help="corpus seed (falls back to TDA_SEED, then 0)")
    p.add_argument("--min-words", type=int, default=2)
    p.add_argument("--max-words", type=int, default=4)
    p.add_argument("--min-word-len", type=int, default=2)
    p.add_argument("--max-word-len", type=int, default=5)
    p.add_argument("--write-features", action="store_true", help="write feature files instead of synthetic refs")
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-asr", help="train on the transcription segment only")
    _add_run_options(p, with_mode=False)
    p.set_defaults(func=cmd_pretrain_asr)

    p = sub.add_parser("train", help="train with the dual-layout objective")
    _add_run_options(p, with_mode=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a manifest with one inference path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--path", choices=sorted(PATH_CHOICES), default="st", help="inference path")
    p.add_argument("--out", required=True, help="decode output file")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside the manifest)")
    p.add_argument("--beam", type=int, default=5, help="beam size (1 = greedy)")
    p.add_argument("--max-len", type=int, dest="max_len", help="maximum emitted tokens")
    p.add_argument("--no-length-normalize", action="store_true", help="rank finished hypotheses by raw score")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score a decode output against manifest references")
    p.add_argument("--decoded", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("agreement", help="teacher-forced KL between the two paths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report file; a histogram is written beside it")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt beside the manifest)")
    p.add_argument("--max-tokens", type=int, default=4000, help="token budget per scoring batch")
    p.add_argument("--no-figure", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("average-checkpoints", help="parameter mean of several checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("experiment", help="paired lambda sweep over seeds with summary and figure")
    _add_run_options(p, with_mode=False)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="comma-separated seeds")
    p.add_argument("--lambdas", type=_float_list, default=[0.0, 1.0], help="comma-separated lambda values")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--pretrain-steps", type=int, default=0, dest="pretrain_steps",
                   help="per-seed transcription-only steps whose encoder initializes both arms (0 = none)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, C.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (OutputError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # bad checkpoint magic, malformed files
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
