"""Layered training configuration: defaults < config file < environment < flags.

Config files are JSON with an explicit schema version; environment
overrides use the UAGS_ prefix (e.g. UAGS_TOTAL_ITERS=500) with values
parsed as JSON where possible.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import SceneLoadError
from .trainer import TrainConfig

CONFIG_SCHEMA_VERSION = 1
ENV_PREFIX = "UAGS_"


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name in TrainConfig.__dataclass_fields__:
            out[name] = _parse_env_value(raw)
    return out


def load_train_config(
    config_file: str | Path | None = None,
    flag_overrides: dict | None = None,
    environ=None,
) -> TrainConfig:
    merged: dict = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise SceneLoadError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise SceneLoadError(f"{path}: malformed JSON ({e})") from e
        version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise SceneLoadError(f"{path}: unsupported config schema_version {version}")
        merged.update(data)
    merged.update(env_overrides(environ))
    for key, value in (flag_overrides or {}).items():
        if value is not None:
            merged[key] = value
    return TrainConfig.from_dict(merged)
