"""Dataset presets and JSON run configuration files.

A configuration file holds optional ``arch`` and ``train`` sections whose
keys are the fields of :class:`~hsicnn.model.ArchConfig` and
:class:`~hsicnn.training.TrainConfig`.
"""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .errors import ConfigError

PRESETS = ("ksc", "ip", "pu", "sa")


def preset_name(name: str) -> str:
    """Canonical preset name; ``ksc-like`` and friends map to ``ksc``."""
    base = name.lower().removesuffix("-like")
    if base not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return base


def load_preset(name: str) -> dict:
    path = resources.files("hsicnn") / "presets" / f"{preset_name(name)}.json"
    return json.loads(path.read_text())


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict) or set(data) - {"name", "arch", "train"}:
        raise ConfigError(f"{path}: expected an object with 'arch' and/or 'train' sections")
    return data


def merge(base: dict, override: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section in ("arch", "train"):
        out.setdefault(section, {}).update(override.get(section, {}))
    return out
