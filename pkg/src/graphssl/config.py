"""Flat key=value run configuration files.

Every key is documented in KEYS below; unknown keys are errors, absent keys
take their defaults, and the fully resolved mapping is echoed into the run
directory so a run can be reproduced from its own artifacts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable

from .errors import ConfigError
from .trainer import TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_dims(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part) for part in raw.split(","))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    doc: str


KEYS: dict[str, Key] = {
    key.name: key
    for key in [
        # dataset
        Key("dataset", str, "two_moons", "two_moons | circles | blobs | csv"),
        Key("data_n", int, 2000, "number of generated samples"),
        Key("data_noise", float, 0.15, "generator noise (two_moons/circles)"),
        Key("data_spread", float, 1.0, "blob cluster std"),
        Key("data_classes", int, 3, "blob class count"),
        Key("data_csv", str, "", "CSV path when dataset=csv"),
        Key("labeled_per_class", int, 2, "labeled samples kept per class"),
        Key("test_fraction", float, 0.25, "held-out test fraction"),
        Key("data_seed", int, -1, "dataset/split seed; -1 follows `seed`"),
        # loss weights and graph knobs
        Key("lambda_nn", float, 1.0, "node-node loss weight"),
        Key("lambda_ne", float, 1.0, "node-edge loss weight"),
        Key("lambda_ee", float, 1.0, "edge-edge loss weight"),
        Key("t", float, 0.1, "edge softmax temperature"),
        Key("alpha", float, 0.1, "propagation restart weight"),
        Key("tau", float, 0.95, "pseudo-label confidence threshold"),
        Key("topn", int, 8, "nearest labeled nodes used for propagation"),
        # component toggles
        Key("use_nn", _parse_bool, True, "node-node consistency on/off"),
        Key("use_ne", _parse_bool, True, "node-edge consistency on/off"),
        Key("use_ee", _parse_bool, True, "edge-edge consistency on/off"),
        Key("use_en", _parse_bool, True, "edge-node consistency (propagated targets) on/off"),
        Key("da", _parse_bool, True, "distribution alignment on/off"),
        Key("feature_norm", _parse_bool, True, "layer-norm feature normalization on/off"),
        Key("threshold_on_raw", _parse_bool, False, "gate the threshold on pre-propagation predictions"),
        Key("da_after_propagation", _parse_bool, False, "align after propagation instead of before"),
        Key("da_momentum", float, 0.99, "running-marginal momentum"),
        # optimization
        Key("steps", int, 3000, "total training steps"),
        Key("batch_size", int, 16, "labeled batch size B"),
        Key("mu", int, 7, "unlabeled batch multiplier"),
        Key("base_lr", float, 0.03, "cosine schedule base learning rate"),
        Key("momentum", float, 0.9, "Nesterov momentum"),
        Key("weight_decay", float, 5e-4, "L2 weight decay (layer-norm params excluded)"),
        Key("ema_decay", float, 0.999, "EMA shadow decay"),
        Key("warmup_steps", int, 0, "optional linear lr warm-up steps"),
        # banks
        Key("unlabeled_bank", int, 1024, "unlabeled memory bank capacity"),
        Key("labeled_bank", int, 0, "labeled bank capacity; 0 = all labeled samples"),
        # model sizes
        Key("hidden_dims", _parse_dims, (64, 64), "encoder hidden widths, comma separated"),
        Key("feature_dim", int, 32, "encoder output width"),
        Key("proj_hidden", int, 32, "projection head hidden width"),
        Key("proj_dim", int, 8, "projection embedding width (< feature_dim)"),
        Key("ln_eps", float, 1e-5, "layer-norm epsilon"),
        # augmentation
        Key("weak_sigma", float, 0.05, "weak view gaussian noise"),
        Key("strong_sigma", float, 0.2, "strong view gaussian noise"),
        Key("strong_dropout", float, 0.1, "strong view coordinate dropout rate"),
        Key("strong_jitter", float, 0.1, "strong view multiplicative scale jitter"),
        # bookkeeping
        Key("seed", int, 0, "training seed"),
        Key("eval_every", int, 100, "evaluation cadence in steps"),
        Key("log_every", int, 1, "metrics logging cadence in steps"),
    ]
}

TRAIN_FIELDS = tuple(TrainConfig.__dataclass_fields__)


def parse_config_file(path) -> dict[str, Any]:
    """Raw key/value pairs from a config file; unknown keys raise ConfigError."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, Any] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, raw = stripped.split("=", 1)
            key = key.strip()
            raw = raw.strip()
            spec = KEYS.get(key)
            if spec is None:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = spec.parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def resolve(overrides: dict[str, Any]) -> dict[str, Any]:
    """Full configuration: defaults overlaid with the given values."""
    unknown = set(overrides) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s): {sorted(unknown)}")
    resolved = {name: key.default for name, key in KEYS.items()}
    resolved.update(overrides)
    return resolved


def train_config(resolved: dict[str, Any]) -> TrainConfig:
    cfg = TrainConfig(**{name: resolved[name] for name in TRAIN_FIELDS})
    cfg.validate()
    return cfg


def write_resolved(resolved: dict[str, Any], path) -> None:
    with open(path, "w") as fh:
        for name in sorted(resolved):
            fh.write(f"{name} = {_fmt(resolved[name])}\n")
