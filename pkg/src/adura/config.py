"""Flat ``key=value`` configuration files.

Blank lines and ``#`` comments are ignored. Keys are the union of the
network, loss and training settings; anything else is rejected.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .layers import NetworkConfig
from .losses import LossWeights
from .training import TrainConfig

SECTIONS = (NetworkConfig, LossWeights, TrainConfig)
KNOWN_KEYS = tuple(f.name for cls in SECTIONS for f in fields(cls))


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}", f"expected key=value, got {line!r}")
        if key in out:
            raise ConfigError(key, f"duplicate key at {source}:{lineno}")
        out[key] = value.strip()
    return out


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(path))


def resolve(mapping):
    """Validate a flat mapping into ``(NetworkConfig, LossWeights, TrainConfig)``."""
    unknown = sorted(set(mapping) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    return NetworkConfig.from_mapping(mapping), LossWeights.from_mapping(mapping), TrainConfig.from_mapping(mapping)


def format_config(mapping):
    """Render a resolved mapping as sorted ``key=value`` lines."""
    return "".join(f"{k}={v}\n" for k, v in sorted(mapping.items()))
