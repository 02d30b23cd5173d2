"""``key=value`` run configuration shared by all CLI commands."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

from .nn import PRESETS, ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_MODEL_KEYS = {f.name: f for f in dataclasses.fields(ModelConfig) if f.name not in ("dropout", "vocab_size")}
_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_OTHER_KEYS: dict[str, type] = {
    "preset": str,
    "data_dir": str,
    "init_from": str,
    "init_decoder": bool,
    "beam_size": int,
    "max_len": int,
    "length_normalize": bool,
    "param_seed": int,
}
KNOWN_KEYS = set(_MODEL_KEYS) | set(_TRAIN_KEYS) | set(_OTHER_KEYS)


def _field_type(key: str):
    if key in _OTHER_KEYS:
        return _OTHER_KEYS[key]
    f = _MODEL_KEYS.get(key) or _TRAIN_KEYS[key]
    return {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type), type(f.default))


def _parse_value(key: str, raw: str) -> Any:
    kind = _field_type(key)
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_pairs(lines, source: str = "<args>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def load_run_config(path=None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Union of the config file (if any) and overrides; overrides win."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_pairs(p.read_text(encoding="utf-8").splitlines(), str(p)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, value) if isinstance(value, str) else value
    return values


def model_config(values: dict[str, Any], vocab_size: int, dropout: float) -> ModelConfig:
    name = values.get("preset", "toy")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    kwargs = {**PRESETS[name], **{k: v for k, v in values.items() if k in _MODEL_KEYS}}
    kwargs["vocab_size"] = vocab_size
    kwargs["dropout"] = dropout
    try:
        return ModelConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def train_config(values: dict[str, Any]) -> TrainConfig:
    try:
        return TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def write_resolved(path, values: dict[str, Any]) -> None:
    lines = [f"{k}={_fmt(values[k])}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
