"""Versioned JSON run configuration with strict unknown-key rejection."""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import InvalidConfigError

DEFAULT_CONFIG = {
    "version": 1,
    "seed": 0,
    "out_dir": "runs",
    "data_dir": None,
    "lead_hours": 1,
    "synthetic": {
        "grid": {"n_lat": 32, "n_lon": 64},
        "n_steps": 96,
        "step_hours": 1,
        "n_levels": 4,
        "emission_rate": 2e-8,
        "emission_tail_index": 1.5,
        "advection_gain": 0.2,
        "diffusion_coeff": 0.05,
        "deposition_rate": 0.02,
        "n_sources": 6,
    },
    "splits": {"train": 0.70, "val": 0.15, "test": 0.15},
    "model": {
        "embed_dim": 64,
        "encoder_depth": 2,
        "decoder_depth": 2,
        "heads": 4,
        "window": [2, 4, 4],
        "dropout": 0.0,
    },
    "train": {
        "learning_rate": 1e-5,
        "epochs": 20,
        "batch_size": 4,
        "smooth_l1_delta": 1.0,
        "surface_var_weights": [1.50, 0.77, 0.66, 3.00, 1.20, 1.20, 1.20],
        "upper_var_weights": [1.0, 1.0, 1.0, 1.0, 1.0],
        "max_steps": None,
    },
    "lora": {"rank": 8, "alpha": 16.0, "dropout": 0.1, "scaling": True},
    "diffusion": {
        "n_train_steps": 1000,
        "beta_start": 1e-4,
        "beta_end": 2e-2,
        "n_sample_steps": 50,
        "learning_rate": 1e-6,
        "epochs": 5,
        "batch_size": 1,
        "hidden": 32,
        "max_steps": None,
    },
    "region": None,
    "climatology": {"period_hours": 24, "n_buckets": 4},
    "dee": {"enabled": False, "delta": 1.0, "ensemble": 1},
    "metrics": {"sedi_percentiles": [90.0], "rqe_quantiles": "high"},
    "plot": {"vmin": None, "vmax": None},
}

_REGION_KEYS = {"lat_min", "lat_max", "lon_min", "lon_max"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise InvalidConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(user: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- command-line overrides, strictly validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for layer in (user, overrides):
        if not layer:
            continue
        if "region" in layer and isinstance(layer["region"], dict):
            bad = set(layer["region"]) - _REGION_KEYS
            if bad:
                raise InvalidConfigError(f"unknown region keys: {sorted(bad)}")
            region = {**(cfg["region"] or {}), **layer["region"]}
            layer = {k: v for k, v in layer.items() if k != "region"}
            cfg = _merge(cfg, layer)
            cfg["region"] = region
        else:
            cfg = _merge(cfg, layer)
    if cfg["version"] != 1:
        raise InvalidConfigError(f"unsupported config version {cfg['version']}")
    if cfg["region"] is not None and set(cfg["region"]) != _REGION_KEYS:
        raise InvalidConfigError("region needs lat_min/lat_max/lon_min/lon_max")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def load_config_file(path) -> dict:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise InvalidConfigError("config file must hold a JSON object")
    return data


def write_resolved(cfg: dict, run_dir):
    path = run_dir / "resolved_config.json"
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
