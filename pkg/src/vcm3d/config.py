"""Run configuration: defaults, strict validation and dotted-path overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from .backbone import BACKBONE_DEFAULTS
from .errors import ConfigError
from .vcm import VCM_DEFAULTS

DEFAULT_CONFIG: dict[str, Any] = {
    "data": {"size": 32, "clip_lo": 0.0, "clip_hi": 255.0, "val_fraction": 0.0},
    "backbone": copy.deepcopy(BACKBONE_DEFAULTS),
    "vcm": copy.deepcopy(VCM_DEFAULTS),
    "schedule": {"T": 1000, "beta_start": 0.0015, "beta_end": 0.0205, "eta": 0.0, "num_inference_steps": 200},
    "loss": {"lambda_mode": "auto", "lambda_value": 1.0},
    "optim": {
        "lr": 5e-5,
        "betas": [0.9, 0.999],
        "weight_decay": 0.01,
        "warmup_steps": 1000,
        "batch_size": 16,
        "steps": 2000,
        "flip_prob": 0.5,
        "checkpoint_every": 0,
    },
    "dropout": {"scheme": "categorical", "subsets": [[0], [1], [0, 1]], "probs": [0.3, 0.3, 0.4], "drop_probs": []},
    "logging": {"every": 1, "time_budget_s": 0.0},
}


def _check(node: Any, ref: Any, path: str, errors: list[str]) -> None:
    if isinstance(ref, dict):
        if not isinstance(node, dict):
            errors.append(f"{path or '<root>'}: expected an object")
            return
        for k, v in node.items():
            sub = f"{path}.{k}" if path else k
            if k not in ref:
                errors.append(f"{sub}: unknown key")
            else:
                _check(v, ref[k], sub, errors)
        return
    if isinstance(ref, bool):
        ok = isinstance(node, bool)
    elif isinstance(ref, float):
        ok = isinstance(node, (int, float)) and not isinstance(node, bool)
    elif isinstance(ref, int):
        ok = isinstance(node, int) and not isinstance(node, bool)
    elif isinstance(ref, str):
        ok = isinstance(node, str)
    elif isinstance(ref, list):
        ok = isinstance(node, list)
    else:
        ok = True
    if not ok:
        errors.append(f"{path}: expected {type(ref).__name__}, got {type(node).__name__}")


def merge(base: dict[str, Any], over: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict[str, Any]) -> None:
    errors: list[str] = []
    _check(cfg, DEFAULT_CONFIG, "", errors)
    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip().split("."), val


def apply_overrides(cfg: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    out = copy.deepcopy(cfg)
    for item in overrides:
        keys, val = parse_override(item)
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-object")
        node[keys[-1]] = val
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict[str, Any]:
    """Defaults <- JSON file <- ``key=value`` overrides, validated strictly."""
    user: dict[str, Any] = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    user = apply_overrides(user, overrides or [])
    validate(user)
    cfg = merge(DEFAULT_CONFIG, user)
    cfg["backbone"]["volume_shape"] = [cfg["data"]["size"]] * 3
    return cfg
