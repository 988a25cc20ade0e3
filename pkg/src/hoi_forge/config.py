"""Run configuration: YAML file + ``section.key=value`` overrides, resolved to a total dict.

Sections and their keys are fixed by :data:`DEFAULTS`; unknown keys are an
error so typos never silently fall back to defaults.
"""
from __future__ import annotations

import copy
from dataclasses import fields

import yaml

from .denoiser import TrainConfig
from .guidance import GuidanceConfig


def _dataclass_defaults(cls):
    return {f.name: f.default for f in fields(cls)}


DEFAULTS = {
    "seed": 0,
    "schedule": {"T": 1000, "s0": 0.008},
    "model": {"hidden_width": 512, "n_hidden": 4, "time_dim": 64, "cond_width": 128,
              "embed_dim": 64, "activation": "silu", "skip": True, "n_coeffs": 16},
    "transition": {"n_coeffs": 8, "hidden_width": 256, "n_hidden": 4, "steps": 1500, "learning_rate": 1e-3},
    "train": {k: v for k, v in _dataclass_defaults(TrainConfig).items() if k != "seed"},
    "guidance": _dataclass_defaults(GuidanceConfig),
    "data": {"specs": [{"kind": "bottle", "scale_range": [0.9, 1.1]},
                       {"kind": "box", "scale_range": [0.9, 1.1]}],
             "count": 200, "records_per_object": 4, "n_points": 512, "split_ratio": 0.8},
    "eval": {"repeats": 3, "pairs": 10, "window": 30, "stride": 10},
    "ablate": {"seeds": 10, "cfg_scales": [0.5, 2.0, 2.5, 3.0, 5.0], "window_sizes": [1, 3, 5, 10, 20]},
}


class ConfigError(ValueError):
    pass


def _merge(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_override(text):
    """``"guidance.cfg_scale=3"`` to ``{"guidance": {"cfg_scale": 3}}`` (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    out = value
    for part in reversed(key.strip().split(".")):
        if not part:
            raise ConfigError(f"bad override key {key!r}")
        out = {part: out}
    return out


def resolve(config=None, overrides=()):
    """Defaults, then the file mapping (or dict), then overrides in order."""
    cfg = copy.deepcopy(DEFAULTS)
    if config is not None:
        _merge(cfg, config)
    for o in overrides:
        _merge(cfg, parse_override(o) if isinstance(o, str) else o)
    train_config(cfg)
    guidance_config(cfg)
    return cfg


def load(path=None, overrides=()):
    data = None
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return resolve(data, overrides)


def dump(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)


def train_config(cfg, **changes):
    return TrainConfig(**{**cfg["train"], "seed": cfg["seed"], **changes})


def guidance_config(cfg, **changes):
    return GuidanceConfig(**{**cfg["guidance"], **changes})
