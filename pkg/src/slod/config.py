"""JSON run configuration: defaults, file loading and dotted overrides."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Iterable, Optional

from .errors import UsageError

DEFAULT_CONFIG: dict = {
    "data": {
        "data_root": None,
        "id_dataset": "mnist",
        "ood_test": ["fashion_mnist", "uniform", "gaussian"],
        "oe_outliers": ["fashion_mnist"],
        "train_limit": None,
        "test_limit": None,
        "ood_limit": None,
        "oe_limit": None,
        "seed": 0,
    },
    "model": {
        "conv_widths": [16, 32],
        "fc_width": 128,
    },
    "train": {
        "epochs": 5,
        "batch_size": 128,
        "lr0": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "seed": 0,
        "flip": False,
        "oe_epochs": 2,
        "distill_epochs": 5,
    },
    "loss": {
        "kind": "hard",
        "alpha": 0.0,
        "temperature": 1.0,
        "lambda": 0.5,
        "distill_alpha": 0.9,
    },
    "experiment": {
        "name": "default",
        "alpha_grid": [0.0, 0.001, 0.01, 0.05, 0.1, 0.2, 0.3],
        "distill_alpha_grid": [0.5, 0.9, 1.0],
        "seeds": [0, 1, 2],
        "ece_bins": 15,
    },
    "output": {
        "dir": "out",
    },
}


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {path!r} must be an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def check_override_key(dotted: str) -> None:
    node: Any = DEFAULT_CONFIG
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise UsageError(f"unknown config key {dotted!r}")
        node = node[part]
    if isinstance(node, dict):
        raise UsageError(f"config key {dotted!r} names a section, not a value")


def parse_override(item: str) -> tuple[str, Any]:
    """'train.epochs=1' -> ('train.epochs', 1). Values parse as JSON, else stay strings."""
    if "=" not in item:
        raise UsageError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    check_override_key(key)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(cfg: dict, overrides: Iterable[tuple[str, Any]]) -> dict:
    for key, value in overrides:
        *head, last = key.split(".")
        node = cfg
        for part in head:
            node = node[part]
        node[last] = value
    return cfg


def load_config(path: Optional[str] = None, overrides: Iterable[tuple[str, Any]] = ()) -> dict:
    """Defaults <- config file <- overrides; SLOD_DATA_ROOT fills data.data_root if still unset."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise UsageError(f"{p}: top level must be an object")
        _merge(cfg, user)
    apply_overrides(cfg, overrides)
    if cfg["data"]["data_root"] is None and os.environ.get("SLOD_DATA_ROOT"):
        cfg["data"]["data_root"] = os.environ["SLOD_DATA_ROOT"]
    return cfg
