"""Single-source configuration: defaults, YAML loading, validation, fingerprint.

Every tunable named by the runtime (chunk horizon, replan window, denoise
steps, verifier threshold and timesteps, refresh/fallback switches, loss
shaping, cost profiles, belt speeds) lives in one nested mapping. A config
file overrides the built-in defaults key by key; unknown keys and type
mismatches are rejected with the offending key path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Configuration schema violation, carrying the offending key path."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "layout": {"pos_dims": 2, "rot_dims": 0},
    "chunk": {"horizon": 50, "replan_size": 12},
    "denoise": {"num_steps": 10},
    "verifier": {
        "timesteps": [1.0 / 3.0, 2.0 / 3.0],
        "delta": 0.15,
        "metric": "l2",
        # scan twice the replan window: a switch is flagged at least one round
        # before it could enter an executed prefix, without degenerating into
        # permanent fallback when episodes are only a few chunks long
        # (null scans the full chunk)
        "gripper_window": 24,
    },
    "runtime": {
        "mode": "flash",
        "periodic_refresh": 2,
        "phase_fallback": True,
        "prefix_cap": True,
        "fallback_accounting": "additive",
    },
    "latency": {"tick_ms": 10.0, "profile": "flash_triton", "baseline_profile": "torch"},
    "env": {
        "x_min": 0.0,
        "x_max": 12.0,
        "y_min": -10.0,
        "y_max": 10.0,
        "belt_y": 0.0,
        "object_start_min": 0.6,
        "object_start_max": 1.6,
        "gripper_home_x": 10.5,
        "gripper_home_y": 8.5,
        "gripper_jitter": 0.3,
        "bin_x": 2.0,
        "bin_y": -8.5,
        "max_step": 0.3,
        "max_ticks": 700,
        "grasp_radius": {"large": 0.30, "small": 0.18},
        "speed_scale": 0.004,
        "speeds": {"demo": 6.0, "medium": 10.0, "high": 13.0, "extra_high": 15.0},
    },
    "dataset": {"episodes_per_variant": 150, "speed": "demo", "seed": 1234},
    "train_main": {
        "epochs": 600,
        "learning_rate": 0.001,
        "batch_size": 64,
        "weight_decay": 0.0001,
        "embed_dim": 32,
        "encoder_hidden": [64],
        "field_hidden": [256, 256],
        "seed": 2345,
    },
    "train_draft": {
        "epochs": 300,
        "learning_rate": 0.001,
        "weight_decay": 0.01,
        "batch_size": 64,
        "huber_beta": 1.0,
        "gamma_prefix": 0.9,
        "tail_weight": 0.1,
        "max_prefix": 16,
        "hidden": [160, 160],
        "target_source": "teacher",
        "val_fraction": 0.1,
        "select_steps": 12,
        "seed": 3456,
    },
    "bench": {
        "trials": 50,
        "methods": [
            {"name": "full_torch", "mode": "full_only", "profile": "torch"},
            {"name": "full_triton", "mode": "full_only", "profile": "triton"},
            {"name": "flash", "mode": "flash", "profile": "flash"},
            {"name": "flash_triton", "mode": "flash", "profile": "flash_triton"},
        ],
        "speeds": ["demo", "medium", "high", "extra_high"],
        "variants": ["large", "small"],
        "baseline": "full_torch",
    },
}

# value -> expected type(s); dict values recurse, lists give the element spec
_SCHEMA: dict = {
    "seed": int,
    "layout": {"pos_dims": int, "rot_dims": int},
    "chunk": {"horizon": int, "replan_size": int},
    "denoise": {"num_steps": int},
    "verifier": {
        "timesteps": [float],
        "delta": float,
        "metric": str,
        "gripper_window": (int, type(None)),
    },
    "runtime": {
        "mode": str,
        "periodic_refresh": int,
        "phase_fallback": bool,
        "prefix_cap": bool,
        "fallback_accounting": str,
    },
    "latency": {"tick_ms": float, "profile": str, "baseline_profile": str},
    "env": {
        "x_min": float,
        "x_max": float,
        "y_min": float,
        "y_max": float,
        "belt_y": float,
        "object_start_min": float,
        "object_start_max": float,
        "gripper_home_x": float,
        "gripper_home_y": float,
        "gripper_jitter": float,
        "bin_x": float,
        "bin_y": float,
        "max_step": float,
        "max_ticks": int,
        "grasp_radius": {"large": float, "small": float},
        "speed_scale": float,
        "speeds": {"demo": float, "medium": float, "high": float, "extra_high": float},
    },
    "dataset": {"episodes_per_variant": int, "speed": str, "seed": int},
    "train_main": {
        "epochs": int,
        "learning_rate": float,
        "batch_size": int,
        "weight_decay": float,
        "embed_dim": int,
        "encoder_hidden": [int],
        "field_hidden": [int],
        "seed": int,
    },
    "train_draft": {
        "epochs": int,
        "learning_rate": float,
        "weight_decay": float,
        "batch_size": int,
        "huber_beta": float,
        "gamma_prefix": float,
        "tail_weight": float,
        "max_prefix": int,
        "hidden": [int],
        "target_source": str,
        "val_fraction": float,
        "select_steps": int,
        "seed": int,
    },
    "bench": {
        "trials": int,
        "methods": [{"name": str, "mode": str, "profile": str}],
        "speeds": [str],
        "variants": [str],
        "baseline": str,
    },
}


def _check(value, spec, path: str) -> None:
    if isinstance(spec, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        for key in value:
            if key not in spec:
                raise ConfigError(f"{path}.{key}: unknown key")
        for key, sub in spec.items():
            if key not in value:
                raise ConfigError(f"{path}.{key}: missing key")
            _check(value[key], sub, f"{path}.{key}")
    elif isinstance(spec, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        for i, item in enumerate(value):
            _check(item, spec[0], f"{path}[{i}]")
    else:
        kinds = spec if isinstance(spec, tuple) else (spec,)
        if float in kinds and isinstance(value, int) and not isinstance(value, bool):
            return  # ints are acceptable where floats are expected
        if bool not in kinds and isinstance(value, bool) and int in kinds:
            raise ConfigError(f"{path}: expected int, got bool")
        if not isinstance(value, kinds):
            names = "/".join(k.__name__ for k in kinds)
            raise ConfigError(f"{path}: expected {names}, got {type(value).__name__}")


def validate_config(config: dict) -> None:
    _check(config, _SCHEMA, "config")


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, override: dict, path: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"{path}.{key}: unknown key")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}.{key}")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Built-in defaults, overlaid with a YAML file and then flat overrides."""
    config = default_config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config: file {path} does not contain a mapping")
        config = _merge(config, loaded, "config")
    if overrides:
        config = _merge(config, overrides, "config")
    validate_config(config)
    return config


def fingerprint(config: dict) -> str:
    """Key-order-insensitive digest of the semantic config content."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def dump_config(config: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh, sort_keys=True)
