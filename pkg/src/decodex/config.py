"""Run configuration: nested defaults, file loading, validation, and
dotted-path overrides.

Every key defaults to the values below; unknown keys are rejected. The top
level `rng_seed` feeds each pipeline stage through a fixed per-stage offset,
and every command echoes its fully materialized config into its output
directory.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .dataset import ArtifactSpec, DatasetSpec, NuisanceSpec, PathologySpec
from .diffusion import DdpmTrainConfig
from .errors import PersistenceError, ValidationError
from .guidance import GuidanceConfig
from .predictors import TrainConfig

CONFIG_ECHO_NAME = "config.json"

DEFAULTS: dict = {
    "rng_seed": 0,
    "dataset": {
        "side": 32,
        "n_per_class": 1000,
        "majority_ratio": 0.90,
        "split_fractions": [0.70, 0.15, 0.15],
        "noise_sigma": 0.02,
        "artifact": {
            "kind": "dot",
            "radius": 4.0,
            "intensity": 0.0,
            "center": None,
            "bar_length": [10, 22],
            "bar_thickness": [2, 3],
            "n_bars": [1, 2],
        },
        "pathology": {
            "amplitude": [0.30, 0.50],
            "sigma": [1.6, 2.8],
            "n_benign": [1, 2],
        },
        "nuisance": {"levels": [0.28, 0.42]},
    },
    "classifier": {
        "objective": "erm",
        "epochs": 12,
        "batch_size": 64,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "dro_eta": 0.05,
        "early_stop_metric": "val_acc",
        "base_channels": 16,
    },
    "detector": {
        "objective": "erm",
        "epochs": 8,
        "batch_size": 64,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "dro_eta": 0.05,
        "early_stop_metric": "val_acc",
        "base_channels": 16,
    },
    "probe": {
        "objective": "erm",
        "epochs": 6,
        "batch_size": 64,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "dro_eta": 0.05,
        "early_stop_metric": "val_acc",
        "base_channels": 16,
    },
    "ddpm": {
        "epochs": 30,
        "batch_size": 128,
        "lr": 2e-3,
        "T": 400,
        "beta_start": 1e-4,
        "beta_end": 2e-2,
        "schedule_kind": "linear",
        "base_channels": 24,
        "temb_dim": 64,
    },
    "guidance": {
        "lambda_c": 8.0,
        "lambda_d": 8.0,
        "lambda_p": 30.0,
        "tau": 200,
        "stochastic": True,
        "from_pure_noise": False,
    },
    "augmentation": {
        "n": 200,
        "majority_fraction": 0.9,
        "mode": "decodex",
    },
    "output": {
        "emit_grids": True,
        "figure_scale": 4,
    },
}

# per-stage seed offsets from the top-level rng_seed
SEED_OFFSETS = {
    "dataset": 0,
    "classifier": 1,
    "detector": 2,
    "probe": 3,
    "ddpm": 4,
    "guidance": 5,
    "augmentation": 6,
}


def _check_keys(cfg: dict, defaults: dict, prefix: str = "") -> None:
    for key, value in cfg.items():
        if key not in defaults:
            raise ValidationError(f"unknown config key {prefix + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            _check_keys(value, defaults[key], prefix + key + ".")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Defaults merged with an optional JSON config file."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    _check_keys(user, DEFAULTS)
    return _merge(DEFAULTS, user)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply `section.key=value` assignments; values are parsed as JSON when
    possible, otherwise taken as strings."""
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must look like path.to.key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = dotted.split(".")
        node = out
        ref = DEFAULTS
        for k in keys[:-1]:
            if not isinstance(ref, dict) or k not in ref:
                raise ValidationError(f"unknown config key {dotted!r}")
            node = node.setdefault(k, {})
            ref = ref[k]
        if not isinstance(ref, dict) or keys[-1] not in ref:
            raise ValidationError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
    return out


def echo_config(cfg: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / CONFIG_ECHO_NAME
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise PersistenceError(f"failed to echo config to {path}: {exc}") from exc
    return path


def stage_seed(cfg: dict, stage: str) -> int:
    return int(cfg["rng_seed"]) + SEED_OFFSETS[stage]


# ---------------------------------------------------------------------------
# Builders from config sections


def build_dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["dataset"]
    return DatasetSpec(
        side=d["side"],
        n_per_class=d["n_per_class"],
        majority_ratio=d["majority_ratio"],
        split_fractions=tuple(d["split_fractions"]),
        artifact=ArtifactSpec(
            kind=d["artifact"]["kind"],
            radius=d["artifact"]["radius"],
            intensity=d["artifact"]["intensity"],
            center=tuple(d["artifact"]["center"]) if d["artifact"]["center"] else None,
            bar_length=tuple(d["artifact"]["bar_length"]),
            bar_thickness=tuple(d["artifact"]["bar_thickness"]),
            n_bars=tuple(d["artifact"]["n_bars"]),
        ),
        pathology=PathologySpec(
            amplitude=tuple(d["pathology"]["amplitude"]),
            sigma=tuple(d["pathology"]["sigma"]),
            n_benign=tuple(d["pathology"]["n_benign"]),
        ),
        nuisance=NuisanceSpec(levels=tuple(d["nuisance"]["levels"])),
        noise_sigma=d["noise_sigma"],
        rng_seed=stage_seed(cfg, "dataset"),
    )


def build_train_config(cfg: dict, section: str, objective: str | None = None) -> TrainConfig:
    s = cfg[section]
    return TrainConfig(
        objective=objective or s["objective"],
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        lr=s["lr"],
        weight_decay=s["weight_decay"],
        dro_eta=s["dro_eta"],
        rng_seed=stage_seed(cfg, section),
        early_stop_metric=s["early_stop_metric"],
        base_channels=s["base_channels"],
    )


def build_ddpm_config(cfg: dict) -> DdpmTrainConfig:
    s = cfg["ddpm"]
    return DdpmTrainConfig(
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        lr=s["lr"],
        T=s["T"],
        beta_start=s["beta_start"],
        beta_end=s["beta_end"],
        schedule_kind=s["schedule_kind"],
        base_channels=s["base_channels"],
        temb_dim=s["temb_dim"],
        rng_seed=stage_seed(cfg, "ddpm"),
    )


def build_guidance_config(cfg: dict) -> GuidanceConfig:
    s = cfg["guidance"]
    return GuidanceConfig(
        lambda_c=s["lambda_c"],
        lambda_d=s["lambda_d"],
        lambda_p=s["lambda_p"],
        tau=s["tau"],
        stochastic=s["stochastic"],
        from_pure_noise=s["from_pure_noise"],
        rng_seed=stage_seed(cfg, "guidance"),
    )
