"""Run configuration: a nested key-value document (YAML or JSON) over defaults.

Unknown keys are rejected. ``key.path=value`` overrides are applied after the
file; values are parsed as YAML scalars (``3``, ``0.5``, ``true``, ``[a, b]``).
See README.md for the schema.
"""

from __future__ import annotations

import copy
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional

import yaml

from ..attend import AttendBlockConfig
from ..context import ContextModelConfig, ContextTrainConfig
from ..datapipe import ImageDataset, generate_toyset, load_cifar10, load_toyset

DEFAULTS = {
    "data": {
        "source": "toyset",
        "dir": None,
        "seed": 1,
        "n_shapes": 4,
        "n_colors": 4,
        "train_size": 2000,
        "test_size": 500,
    },
    "context": {
        "variant": "CDCGM",
        "repulsion": True,
        "margin": 0.01,
        "repulsion_weight": 0.001,
        "lambda_max": 0.01,
        "widths": [32, 64, 64, 128, 256, 256],
        "disc_width": 128,
        "disc_arch": "conv",
        "epochs": 20,
        "batch_size": 64,
        "lr": 0.0002,
        "disc_steps": 1,
        "seed": 0,
    },
    "classifier": {
        "backbone": "resnet20",
        "context_checkpoint": None,
        "points": ["stage2", "stage3"],
        "use_channel_attention": True,
        "use_rebias": True,
        "epochs": 40,
        "batch_size": 128,
        "seed": 0,
    },
    "ablation": {
        "arms": ["baseline", "cdcgm"],
        "seeds": [0, 1, 2],
        "dm_backbone": "resnet20",
    },
    "out_dir": "runs/default",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    out = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if doc is not None:
            if not isinstance(doc, dict):
                raise ConfigError(f"config {path} must be a mapping at top level")
            _merge(cfg, doc)
    for item in overrides:
        _merge(cfg, parse_override(item))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        context_model_config(cfg, n_classes=2)
        AttendBlockConfig(use_channel_attention=cfg["classifier"]["use_channel_attention"],
                          use_rebias=cfg["classifier"]["use_rebias"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["data"]["source"] not in ("toyset", "cifar10-binary"):
        raise ConfigError(f"unknown data.source {cfg['data']['source']!r}")
    if cfg["data"]["source"] == "cifar10-binary" and not cfg["data"]["dir"]:
        raise ConfigError("data.dir is required for cifar10-binary")
    for key in ("epochs", "batch_size"):
        for section in ("context", "classifier"):
            if not isinstance(cfg[section][key], int) or cfg[section][key] < 1:
                raise ConfigError(f"{section}.{key} must be a positive integer")


def context_model_config(cfg: dict, n_classes: int) -> ContextModelConfig:
    c = cfg["context"]
    return ContextModelConfig(variant=str(c["variant"]).upper(), n_classes=n_classes,
                              widths=tuple(c["widths"]), repulsion=bool(c["repulsion"]),
                              margin=float(c["margin"]),
                              repulsion_weight=float(c["repulsion_weight"]),
                              lambda_max=float(c["lambda_max"]), disc_width=int(c["disc_width"]),
                              disc_arch=str(c["disc_arch"]))


def context_train_config(cfg: dict) -> ContextTrainConfig:
    c = cfg["context"]
    return ContextTrainConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=float(c["lr"]),
                              disc_steps=int(c["disc_steps"]), seed=int(c["seed"]))


def attend_config(cfg: dict) -> AttendBlockConfig:
    base = AttendBlockConfig()
    c = cfg["classifier"]
    return replace(base, use_channel_attention=bool(c["use_channel_attention"]),
                   use_rebias=bool(c["use_rebias"]))


def load_data(cfg: dict) -> tuple[ImageDataset, ImageDataset]:
    """(train, test) splits described by the ``data`` section."""
    d = cfg["data"]
    if d["source"] == "cifar10-binary":
        train = load_cifar10(d["dir"], "train")
        test = load_cifar10(d["dir"], "test")
        return (train.subset(range(min(d["train_size"], len(train)))),
                test.subset(range(min(d["test_size"], len(test)))))
    if d["dir"]:
        root = Path(d["dir"])
        return load_toyset(root / "train"), load_toyset(root / "test")
    full = generate_toyset(d["seed"], d["n_shapes"], d["n_colors"],
                           d["train_size"] + d["test_size"])
    return full.split(d["train_size"])


def out_dir(cfg: dict, override: Optional[str] = None) -> Path:
    return Path(override or cfg["out_dir"])
