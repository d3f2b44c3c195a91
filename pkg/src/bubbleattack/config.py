"""Experiment configuration: strict JSON with defaults and provenance hashing.

Every key is known in advance. Anything else is rejected with the JSON
pointer of the offending key, as is a value of the wrong type.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

FULL_SCALE = {"bubbles": 42_679, "swatches": 423_703}

DEFAULTS = {
    "seed": 0,
    "data": {
        "scale": "desk",
        "bubbles": 2000,
        "swatches": 2000,
        "mark_fraction": 0.5,
        "swatch_threshold": 500.0,
        "dead_band": 50.0,
        "train_fraction": 0.8,
    },
    "model": {
        "arch": "simplecnn",
        "dropout": 0.5,
    },
    "train": {
        "learning_rate": 0.003,
        "dropout_rate": None,
        "epochs": 4,
        "weight_decay": 0.0,
        "batch_size": 64,
        "optimizer": "adam",
        "loss": "ce",
        "precision": "f32",
        "flush_to_zero": False,
        "momentum": 0.9,
        "betas": [0.9, 0.999],
        "adam_eps": 1e-8,
    },
    "svm": {
        "learning_rate": 0.01,
        "epochs": 500,
        "weight_decay": 1e-6,
    },
    "attack": {
        "attacks": ["apgd"],
        "losses": ["ce", "dlr"],
        "epsilons": [4 / 255, 8 / 255, 16 / 255, 32 / 255, 64 / 255, 1.0],
        "samples_per_class": 100,
        "steps": 50,
        "step_size": None,
        "momentum_decay": 1.0,
        "apgd_alpha": 0.75,
        "apgd_rho": 0.75,
        "random_start": False,
        "kappa": 0.0,
        "precision": "f32",
        "flush_to_zero": False,
    },
    "diagnose": {
        "samples_per_class": 100,
        "epsilon": 0.031,
        "step_size": 0.00155,
        "steps": 20,
        "modes": ["f32", "f64", "tf32"],
    },
    "channel": {
        "dither": "bayer8",
        "dot_gain": 0.3,
        "noise_sigma": 0.03,
        "jitter_px": 0.5,
        "pairs": 1000,
        "eval_samples": 1000,
        "denoiser_epochs": 3,
        "denoiser_lr": 0.003,
        "denoiser_batch": 32,
        "over_epsilons": [8 / 255, 16 / 255, 32 / 255],
        "over_samples": 100,
        "export_pages": 0,
    },
    "impact": {
        "win_share": 0.415,
        "lose_share": 0.395,
        "blank_rate": 0.12,
        "deploy": 1.0,
        "success": 0.1,
        "recast": 0.3,
        "target_margin": 0.005,
        "ballots": 1_000_000,
        "races_csv": None,
        "state": "",
    },
    "output": {
        "dir": "runs/default",
    },
}

# keys whose value may be null in addition to the default's type
NULLABLE = {"/train/dropout_rate", "/attack/step_size", "/impact/races_csv", "/channel/dither"}
CHOICES = {
    "/data/scale": {"desk", "full"},
    "/model/arch": {"simplecnn", "svm"},
    "/train/optimizer": {"adam", "sgd"},
    "/train/loss": {"ce", "hinge"},
    "/train/precision": {"f64", "f32", "tf32"},
    "/attack/precision": {"f64", "f32", "tf32"},
    "/channel/dither": {"bayer8", "error_diffusion", None},
}
LIST_CHOICES = {
    "/attack/attacks": {"apgd", "pgd", "mim", "fgsm"},
    "/attack/losses": {"ce", "dlr"},
    "/diagnose/modes": {"f64", "f32", "tf32"},
}


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _escape(key: str) -> str:
    return key.replace("~", "~0").replace("/", "~1")


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _merge(base: dict, override: dict, pointer: str = "") -> dict:
    if not isinstance(override, dict):
        raise ConfigError(pointer, "expected an object")
    out = copy.deepcopy(base)
    for key, value in override.items():
        ptr = f"{pointer}/{_escape(key)}"
        if key not in base:
            raise ConfigError(ptr, "unknown key")
        default = base[key]
        if isinstance(default, dict):
            out[key] = _merge(default, value, ptr)
            continue
        if value is None:
            if ptr not in NULLABLE:
                raise ConfigError(ptr, "may not be null")
        elif default is None:
            if not isinstance(value, (int, float, str)) or isinstance(value, bool):
                raise ConfigError(ptr, f"unexpected type {type(value).__name__}")
        elif not _type_ok(value, default):
            raise ConfigError(ptr, f"expected {type(default).__name__}, got {type(value).__name__}")
        if ptr in CHOICES and value not in CHOICES[ptr]:
            raise ConfigError(ptr, f"must be one of {sorted(c for c in CHOICES[ptr] if c)}")
        if ptr in LIST_CHOICES:
            for i, item in enumerate(value):
                if item not in LIST_CHOICES[ptr]:
                    raise ConfigError(f"{ptr}/{i}", f"must be one of {sorted(LIST_CHOICES[ptr])}")
        out[key] = value
    return out


def _reject_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ValueError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def _reject_constant(name):
    raise ValueError(f"non-standard JSON constant {name}")


def parse_config(text: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults merged with ``text`` (JSON) and then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if text:
        try:
            doc = json.loads(text, object_pairs_hook=_reject_duplicates, parse_constant=_reject_constant)
        except ValueError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    _check_ranges(cfg)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    text = Path(path).read_text() if path else None
    return parse_config(text, overrides)


def _check_ranges(cfg: dict):
    positive = ["/train/learning_rate", "/svm/learning_rate", "/train/batch_size", "/attack/steps",
                "/diagnose/steps", "/channel/denoiser_lr", "/channel/denoiser_batch", "/impact/ballots"]
    nonneg = ["/seed", "/data/bubbles", "/data/swatches", "/train/epochs", "/svm/epochs",
              "/train/weight_decay", "/svm/weight_decay", "/attack/samples_per_class",
              "/diagnose/samples_per_class", "/channel/dot_gain", "/channel/noise_sigma",
              "/channel/jitter_px", "/channel/pairs", "/channel/eval_samples", "/channel/denoiser_epochs",
              "/channel/over_samples", "/channel/export_pages"]
    unit = ["/data/mark_fraction", "/diagnose/epsilon",
            "/impact/win_share", "/impact/lose_share", "/impact/blank_rate", "/impact/deploy",
            "/impact/success", "/impact/recast", "/impact/target_margin"]
    for ptr in positive:
        if get(cfg, ptr) <= 0:
            raise ConfigError(ptr, "must be positive")
    for ptr in nonneg:
        if get(cfg, ptr) < 0:
            raise ConfigError(ptr, "must be >= 0")
    for ptr in unit:
        if not 0.0 <= get(cfg, ptr) <= 1.0:
            raise ConfigError(ptr, "must lie in [0, 1]")
    frac = cfg["data"]["train_fraction"]
    if not 0.0 < frac < 1.0:
        raise ConfigError("/data/train_fraction", "must lie strictly between 0 and 1")
    for i, e in enumerate(cfg["attack"]["epsilons"]):
        if isinstance(e, bool) or not isinstance(e, (int, float)) or not 0.0 <= e <= 1.0:
            raise ConfigError(f"/attack/epsilons/{i}", "must be a number in [0, 1]")
    for i, e in enumerate(cfg["channel"]["over_epsilons"]):
        if isinstance(e, bool) or not isinstance(e, (int, float)) or not 0.0 <= e <= 1.0:
            raise ConfigError(f"/channel/over_epsilons/{i}", "must be a number in [0, 1]")
    if len(cfg["train"]["betas"]) != 2:
        raise ConfigError("/train/betas", "must hold two numbers")


def get(cfg: dict, pointer: str):
    node = cfg
    for part in pointer.strip("/").split("/"):
        node = node[part.replace("~1", "/").replace("~0", "~")]
    return node


def dataset_counts(cfg: dict) -> dict:
    if cfg["data"]["scale"] == "full":
        return dict(FULL_SCALE)
    return {"bubbles": cfg["data"]["bubbles"], "swatches": cfg["data"]["swatches"]}


def experiment(cfg: dict) -> dict:
    """The config without ``output``: where results go is not part of what they are."""
    return {k: v for k, v in cfg.items() if k != "output"}


def canonical(cfg: dict) -> str:
    return json.dumps(experiment(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()
