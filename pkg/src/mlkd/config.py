"""Experiment configuration: defaults, JSON files and flag overrides."""
from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError

# Training defaults, one value per hyperparameter.
TRAINING_DEFAULTS = {
    "lr": 5e-5,
    "batch_size": 32,
    "warmup_fraction": 0.1,
    "teacher_epochs": 3,
    "max_epochs": 100,
    "patience": 10,
    "margin": 0.2,
    "p_norm": 2,
    "weight_decay": 1e-2,
    "betas": [0.9, 0.999],
    "max_len": 512,
}

PROBE_DEFAULTS = {"probe_lr": 1e-2}

DEFAULTS = {
    **TRAINING_DEFAULTS,
    **PROBE_DEFAULTS,
    "temperature": 1.0,
    "vote_distance": "squared_euclidean",
    "losses": "kd,sce,sim,rel",
    "task": None,
    "teachers": [],
    "corpus": None,
    "seed": 0,
    "model": {},
}

MODEL_KEYS = ("n_layers", "n_heads", "d_hidden", "d_ff", "dropout")


def _check_keys(cfg: dict, where: str):
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{where}: unknown config key {unknown[0]!r}")
    model = cfg.get("model") or {}
    if not isinstance(model, dict):
        raise ConfigError(f"{where}: 'model' must be an object")
    bad = sorted(set(model) - set(MODEL_KEYS))
    if bad:
        raise ConfigError(f"{where}: unknown model key {bad[0]!r}")


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    if not text.strip():
        return {}
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return raw


def resolve_config(file=None, overrides: dict | None = None) -> dict:
    """Merge defaults, then ``file`` (path or dict), then non-None ``overrides``.

    >>> resolve_config({"lr": 1e-4}, {"lr": 5e-5})["lr"]
    5e-05
    """
    from_file = read_config_file(file) if isinstance(file, (str, Path)) else dict(file or {})
    _check_keys(from_file, str(file) if isinstance(file, (str, Path)) else "config")
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys(flags, "flags")
    cfg = json.loads(json.dumps(DEFAULTS))
    for layer in (from_file, flags):
        for k, v in layer.items():
            if k == "model":
                cfg["model"] = {**cfg["model"], **v}
            else:
                cfg[k] = v
    if isinstance(cfg["losses"], (list, tuple)):
        cfg["losses"] = ",".join(cfg["losses"])
    if isinstance(cfg["teachers"], str):
        cfg["teachers"] = [t for t in cfg["teachers"].split(",") if t]
    cfg["betas"] = [float(b) for b in cfg["betas"]]
    if len(cfg["betas"]) != 2:
        raise ConfigError("betas must hold two values")
    return cfg


def train_hp(cfg: dict):
    from .teacher import TrainHP

    return TrainHP(
        epochs=int(cfg["teacher_epochs"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
        warmup_fraction=float(cfg["warmup_fraction"]), weight_decay=float(cfg["weight_decay"]),
        betas=tuple(cfg["betas"]), max_len=int(cfg["max_len"]),
    )


def probe_hp(cfg: dict):
    from dataclasses import replace

    return replace(train_hp(cfg), lr=float(cfg["probe_lr"]))


def distill_hp(cfg: dict):
    from .distill import DistillHP

    return DistillHP(
        max_epochs=int(cfg["max_epochs"]), patience=int(cfg["patience"]), batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]), warmup_fraction=float(cfg["warmup_fraction"]),
        weight_decay=float(cfg["weight_decay"]), betas=tuple(cfg["betas"]), max_len=int(cfg["max_len"]),
    )


def loss_config(cfg: dict):
    from .losses import LossConfig

    try:
        return LossConfig.parse(
            cfg["losses"], margin=float(cfg["margin"]), p_norm=int(cfg["p_norm"]),
            temperature=float(cfg["temperature"]), vote_distance=cfg["vote_distance"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
