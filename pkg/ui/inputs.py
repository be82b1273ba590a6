# ui/inputs.py
"""
Configuration inputs: predefined presets, YAML config files and command-line
overrides, resolved into the typed config dataclasses.

Resolution order (later wins): dataclass defaults, preset, config file,
`--set key=value` overrides, `--seed`.
"""
import copy
import logging
import os
import typing
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import yaml

from core.data import SyntheticSpec
from core.errors import ConfigError
from core.training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "drusen-vs-normal"

# Predefined scenarios for quick runs
PREDEFINED_PRESETS: Dict[str, Dict[str, Any]] = {
    "drusen-vs-normal": {
        "description": "Two classes: clean layered background vs bright drusen-like blobs",
        "synthetic": {
            "image_size": 64,
            "classes": [
                {"name": "normal", "kind": "none"},
                {"name": "drusen", "kind": "bright_blob", "amplitude": 0.4},
            ],
            "counts": {"train": 200, "val": 50, "test": 50},
        },
        "train": {
            "encoder": {"resolutions": [32, 48, 64]},
            "epochs_per_resolution": 5,
            "finetune_epochs": 30,
        },
    },
    "three-class": {
        "description": "Normal, drusen-like bright blobs and fluid-like dark ellipses",
        "synthetic": {
            "image_size": 64,
            "classes": [
                {"name": "normal", "kind": "none"},
                {"name": "drusen", "kind": "bright_blob", "amplitude": 0.4},
                {"name": "fluid", "kind": "dark_ellipse", "amplitude": 0.25},
            ],
            "counts": {"train": 240, "val": 60, "test": 60},
        },
        "train": {
            "encoder": {"resolutions": [32, 48, 64]},
            "epochs_per_resolution": 5,
            "finetune_epochs": 30,
        },
    },
    "tiny": {
        "description": "Smoke-test scale: 32px images, one block, a couple of epochs",
        "synthetic": {
            "image_size": 32,
            "lesion_radius": [2, 4],
            "counts": {"train": 24, "val": 8, "test": 8},
        },
        "train": {
            "encoder": {"embed_dim": 16, "depth": 1, "heads": 2, "resolutions": [16, 32]},
            "epochs_per_resolution": 1,
            "finetune_epochs": 2,
            "batch_size": 8,
            "progress": False,
        },
    },
}


def preset_names() -> Tuple[str, ...]:
    return tuple(PREDEFINED_PRESETS)


def get_preset(name: Optional[str]) -> Dict[str, Any]:
    name = name or DEFAULT_PRESET
    if name not in PREDEFINED_PRESETS:
        raise ConfigError(f"unknown preset '{name}', choose from {', '.join(PREDEFINED_PRESETS)}")
    return copy.deepcopy(PREDEFINED_PRESETS[name])


def load_yaml(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    return data


def deep_merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    """`a.b=3` -> {"a": {"b": 3}}; values are parsed as YAML scalars or lists"""
    out: Dict[str, Any] = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override '{item}' is not of the form key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value of override '{item}': {exc}") from exc
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{item}' conflicts with another override")
        node[parts[-1]] = value
    return out


def build_dataclass(cls, values: Mapping[str, Any], where: str = ""):
    """Instantiate `cls` from a nested mapping; unknown keys are a ConfigError"""
    if not isinstance(values, Mapping):
        raise ConfigError(f"'{where.rstrip('.') or cls.__name__}' must be a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {[where + k for k in unknown]} for {cls.__name__}")
    kwargs = {}
    for name, value in values.items():
        hint = hints.get(name)
        if is_dataclass(hint) and isinstance(value, Mapping):
            kwargs[name] = build_dataclass(hint, value, f"{where}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__} settings: {exc}") from exc


def default_seed() -> Optional[int]:
    raw = os.getenv("PROTOPATCH_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"PROTOPATCH_SEED must be an integer, got '{raw}'") from exc


def _resolve(section: str, path, preset: Optional[str], overrides: Iterable[str],
             seed: Optional[int]) -> Dict[str, Any]:
    values = get_preset(preset).get(section, {})
    if path:
        data = load_yaml(path)
        # a file may hold both sections or just the fields of this one
        if section in data or "synthetic" in data or "train" in data:
            data = data.get(section, {})
        values = deep_merge(values, data)
    values = deep_merge(values, parse_overrides(overrides))
    if seed is None and "seed" not in values:
        seed = default_seed()
    if seed is not None:
        values["seed"] = int(seed)
    return values


def resolve_synthetic_spec(path=None, preset: Optional[str] = None, overrides: Iterable[str] = (),
                           seed: Optional[int] = None) -> Tuple[SyntheticSpec, Dict[str, Any]]:
    values = _resolve("synthetic", path, preset, overrides, seed)
    spec = build_dataclass(SyntheticSpec, values).validate()
    return spec, values


def resolve_train_config(path=None, preset: Optional[str] = None, overrides: Iterable[str] = (),
                         seed: Optional[int] = None) -> Tuple[TrainConfig, Dict[str, Any]]:
    values = _resolve("train", path, preset, overrides, seed)
    config = build_dataclass(TrainConfig, values).validate()
    return config, values


def describe_presets() -> str:
    return "\n".join(f"  {name}: {p['description']}" for name, p in PREDEFINED_PRESETS.items())
