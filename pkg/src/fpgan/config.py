"""JSON run configuration with strict keys, typed values and CLI overrides."""
from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, DataError
from .trainer import TrainConfig

# key -> (accepted python types, name used in error messages)
_INT = ((int,), "integer")
_FLOAT = ((int, float), "number")
_STR = ((str,), "string")
_PATH = ((str, type(None)), "string or null")

SCHEMA = {
    "resolution": _INT,
    "latent_dim": _INT,
    "base_channels": _INT,
    "variant": _STR,
    "lr": _FLOAT,
    "beta1": _FLOAT,
    "beta2": _FLOAT,
    "adam_eps": _FLOAT,
    "batch_size": _INT,
    "steps": _INT,
    "seed": _INT,
    "eval_every": _INT,
    "dsc_order": _STR,
    "data_dir": _PATH,
    "out_dir": _PATH,
    "disc_width": _INT,
    "eval_samples": _INT,
    "extractor_seed": _INT,
    "dtype": _STR,
}

TRAIN_REQUIRED = ("resolution", "data_dir", "out_dir")

assert set(SCHEMA) == {f.name for f in fields(TrainConfig)}


def _read(source) -> tuple[dict, str]:
    if isinstance(source, dict):
        return dict(source), "<dict>"
    if isinstance(source, Path) or not str(source).lstrip().startswith("{"):
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
        where = str(path)
    else:
        text, where = str(source), "<text>"
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: top level must be a JSON object")
    return doc, where


def _check(key: str, value) -> None:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    types, name = SCHEMA[key]
    # bool is an int subclass but never a valid numeric setting
    if isinstance(value, bool) or not isinstance(value, types):
        raise ConfigError(f"config key {key!r} expects {name}, got {type(value).__name__} {value!r}")


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` where value is JSON, falling back to a bare string."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def parse_config(source, overrides: Iterable[str] = (), required: Iterable[str] = ()) -> TrainConfig:
    """Load a config from a path, JSON text or dict and apply ``k=v`` overrides.

    Missing keys take the :class:`TrainConfig` defaults. Keys in ``required``
    must be present after overrides.
    """
    doc, where = _read(source)
    for key, value in doc.items():
        _check(key, value)
    for item in overrides:
        key, value = parse_override(item)
        _check(key, value)
        doc[key] = value
    missing = [k for k in required if doc.get(k) is None]
    if missing:
        raise ConfigError(f"{where}: missing required key(s): {', '.join(missing)}")
    for key in ("lr", "beta1", "beta2", "adam_eps"):
        if key in doc:
            doc[key] = float(doc[key])
    return TrainConfig(**doc)
