"""Experiment configuration: nested JSON with dotted-path overrides and strict keys."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .corruptions import CorruptionKind


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "data": {
        "path": None,          # RTEN dataset; None -> <output_dir>/dataset.rten or generate in memory
        "classes": 5,
        "per_class": 120,
        "size": 16,
        "split": "test",       # split used by evaluation commands
        "max_examples": None,
    },
    "model": {
        "checkpoint": None,    # None -> <output_dir>/model.rten
        "widths": [16, 32],
        "hidden": 64,
        "bn_momentum": 0.1,
    },
    "train": {
        "epochs": 10,
        "batch_size": 64,
        "lr": 0.05,
        "decay_epochs": None,
        "decay_factor": 0.1,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "regime": "clean",
        "sigma": 0.0,
        "norm": "l2",
        "epsilon": 0.0,
        "attack_steps": 5,
        "step_size": None,
        "random_start": True,
        "bn_attack_mode": "train",
        "early_stop": True,
        "val_fraction": 0.2,
    },
    "attack": {
        "kind": "pgd",         # pgd | fgsm
        "norm": "l2",
        "epsilon": 0.5,
        "steps": 20,
        "step_size": None,
        "random_start": True,
        "eot_m": None,         # None -> plain PGD; m -> EoT over m models
    },
    "smoothing": {
        "sigma": 0.5,
        "n0": 100,
        "n": 10000,
        "alpha": 0.001,
        "mc_batch": 500,
        "radii": [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
        "noise_levels": [0.0, 0.25, 0.5, 1.0],
    },
    "adapt": {
        "rho": None,           # None -> no test-time adaptation
        "batch_size": 128,
        "blend": "std",
        "exclude_self": False,
    },
    "corruption": {
        "kinds": [k.value for k in CorruptionKind],
        "reference": None,     # ReferenceErrorTable JSON
        "write_reference": False,
    },
    "output_dir": "runs/default",
    "seed": 0,
}


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, val in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path} must be an object")
            _merge(base[key], val, path + ".")
        else:
            base[key] = val


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise ConfigError(f"{dotted} is a section, not a leaf")
            node[part] = value
        else:
            node = node[part]


def get_path(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    return node


def resolve(path=None, overrides=(), seed: int | None = None, out: str | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be an object")
        _merge(cfg, doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        set_path(cfg, key.strip(), parse_value(val.strip()))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output_dir"] = out
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    s = cfg["smoothing"]
    if not 0 < s["alpha"] < 1:
        raise ConfigError("smoothing.alpha must lie in (0, 1)")
    if s["sigma"] <= 0:
        raise ConfigError("smoothing.sigma must be positive")
    if s["n"] < 1 or s["n0"] < 1:
        raise ConfigError("smoothing.n and smoothing.n0 must be >= 1")
    rho = cfg["adapt"]["rho"]
    if rho is not None and not 0.0 <= rho <= 1.0:
        raise ConfigError("adapt.rho must lie in [0, 1]")
    if cfg["adapt"]["batch_size"] < 2:
        raise ConfigError("adapt.batch_size must be >= 2")
    if cfg["adapt"]["blend"] not in ("std", "var"):
        raise ConfigError("adapt.blend must be 'std' or 'var'")
    if cfg["attack"]["kind"] not in ("pgd", "fgsm"):
        raise ConfigError("attack.kind must be 'pgd' or 'fgsm'")
    if cfg["attack"]["norm"] not in ("l2", "linf"):
        raise ConfigError("attack.norm must be 'l2' or 'linf'")
    for k in cfg["corruption"]["kinds"]:
        try:
            CorruptionKind(k)
        except ValueError as exc:
            raise ConfigError(f"unknown corruption kind {k!r}") from exc


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical config; ``output_dir`` is where results go, not what they are, so it is left out."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(canonical(body).encode()).hexdigest()
