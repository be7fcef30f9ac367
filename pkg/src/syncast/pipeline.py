"""End-to-end wiring used by the command-line interface: dataset manifests,
checkpoint round trips and the deterministic + refined inference path."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import scg
from .backbone import Backbone, ModelConfig, crop_to_region, forward_state, rollout
from .checkpoint import (
    file_sha256,
    load_checkpoint,
    load_model_tensors,
    model_tensors,
    save_checkpoint,
)
from .diffusion import (
    Climatology,
    Denoiser,
    DiffusionConfig,
    build_climatology,
    build_conditioning,
    climatology_gate,
    conditioning_channels,
    denoise_ensemble_mean,
    denoise_sample,
)
from .errors import InvalidConfigError, SyncastError
from .grid import (
    AtmosphericState,
    GridSpec,
    NormalizationStats,
    RegionSpec,
    SURFACE_VARS,
    VariableCatalog,
    crop_region,
    denormalize_state,
    normalize_state,
    pm_log_forward,
    pm_log_inverse,
    subgrid,
)
from .lora import attach_lora
from .synthetic import SyntheticConfig, gen_synthetic_sequence, make_training_pairs

FORECAST_VARS = list(SURFACE_VARS) + ["dee_mask"]


# --- dataset ------------------------------------------------------------------


def synthetic_config_from_dict(d: dict, seed: int) -> SyntheticConfig:
    grid = GridSpec.toy(d["grid"]["n_lat"], d["grid"]["n_lon"])
    levels = tuple(1000.0 - 200.0 * k for k in range(d["n_levels"]))
    return SyntheticConfig(
        seed=seed, grid=grid, n_steps=d["n_steps"], step_hours=d["step_hours"],
        emission_rate=d["emission_rate"],
        emission_tail_index=d["emission_tail_index"],
        advection_gain=d["advection_gain"],
        diffusion_coeff=d["diffusion_coeff"],
        deposition_rate=d["deposition_rate"],
        n_sources=d["n_sources"],
        catalog=VariableCatalog(pressure_levels_hpa=levels),
    ).validate()


def generate_dataset(cfg: dict, run_dir: Path) -> Path:
    """Generate the synthetic sequence, split it in time and write SCG1 files
    plus a JSON manifest."""
    syn = synthetic_config_from_dict(cfg["synthetic"], cfg["seed"])
    states = gen_synthetic_sequence(syn)
    fr = cfg["splits"]
    n = len(states)
    n_train = max(2, int(round(fr["train"] * n)))
    n_val = max(1, int(round(fr["val"] * n)))
    splits = {
        "train": states[:n_train],
        "val": states[n_train:n_train + n_val],
        "test": states[n_train + n_val:],
    }
    if any(len(v) == 0 for v in splits.values()):
        raise InvalidConfigError("sequence too short for the requested splits")
    files = {}
    for name, seq in splits.items():
        path = run_dir / f"{name}.scg"
        scg.write_grid_file(seq, path, step_hours=syn.step_hours)
        files[name] = path.name
    stats = NormalizationStats.fit(splits["train"])
    manifest = {
        "files": files,
        "splits": {k: [int(s.timestamp) for s in v] for k, v in splits.items()},
        "lead_hours": cfg["lead_hours"],
        "step_hours": syn.step_hours,
        "n_levels": syn.catalog.n_levels,
        "stats": stats.to_dict(),
    }
    mpath = run_dir / "manifest.json"
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return mpath


@dataclass
class Dataset:
    manifest: dict
    data_dir: Path

    @property
    def stats(self) -> NormalizationStats:
        return NormalizationStats.from_dict(self.manifest["stats"])

    def split(self, name: str) -> list:
        path = self.data_dir / self.manifest["files"][name]
        return scg.read_grid_file(path).to_states()


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.exists():
        raise InvalidConfigError(f"no manifest.json in {data_dir}")
    with open(mpath) as f:
        return Dataset(json.load(f), data_dir)


def region_from_config(cfg: dict, grid: GridSpec) -> RegionSpec | None:
    r = cfg.get("region")
    if r is None:
        return None
    return RegionSpec.from_bounds(grid, r["lat_min"], r["lat_max"],
                                  r["lon_min"], r["lon_max"])


def normalized_pairs(ds: Dataset, split: str, lead_hours: int,
                     region: RegionSpec | None = None) -> tuple:
    """(normalized pairs, grid of the (possibly cropped) domain)."""
    states = ds.split(split)
    grid = states[0].grid
    if region is not None:
        states = [crop_region(s, region) for s in states]
        grid = states[0].grid
    stats = ds.stats
    states = [normalize_state(s, stats) for s in states]
    return make_training_pairs(states, lead_hours), grid


# --- checkpoints --------------------------------------------------------------


def save_backbone(path, model: Backbone, stats: NormalizationStats,
                  step_hours: int, meta: dict | None = None,
                  extra_tensors: dict | None = None):
    config = {
        "model": model.cfg.to_dict(),
        "n_lat": model.n_lat,
        "n_lon": model.n_lon,
        "stats": stats.to_dict(),
        "step_hours": step_hours,
    }
    tensors = model_tensors(model)
    if extra_tensors:
        tensors.update(extra_tensors)
    save_checkpoint(path, "backbone", config, tensors, meta=meta)


def load_backbone(path) -> tuple:
    manifest, tensors = load_checkpoint(path)
    if manifest["kind"] != "backbone":
        raise InvalidConfigError(f"{path} is a {manifest['kind']} checkpoint")
    cfg = manifest["config"]
    model = Backbone(ModelConfig.from_dict(cfg["model"]),
                     cfg["n_lat"], cfg["n_lon"])
    model_state = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    load_model_tensors(model, model_state)
    model.eval()
    stats = NormalizationStats.from_dict(cfg["stats"])
    return model, stats, cfg["step_hours"], manifest, tensors


def save_adapters(path, model: Backbone, lora_cfg: dict, base_path,
                  meta: dict | None = None):
    tensors = {name: p.detach().cpu().numpy()
               for name, p in model.named_parameters()
               if "lora_a" in name or "lora_b" in name}
    config = {
        "lora": lora_cfg,
        "model": model.cfg.to_dict(),
        "n_lat": model.n_lat,
        "n_lon": model.n_lon,
        "base_sha256": file_sha256(base_path),
    }
    save_checkpoint(path, "adapters", config, tensors, meta=meta)


def load_adapters_onto(model: Backbone, path, check_base: str | None = None) -> Backbone:
    manifest, tensors = load_checkpoint(path)
    if manifest["kind"] != "adapters":
        raise InvalidConfigError(f"{path} is a {manifest['kind']} checkpoint")
    if check_base is not None and manifest["config"]["base_sha256"] != check_base:
        raise InvalidConfigError("adapter checkpoint references a different base")
    lc = manifest["config"]["lora"]
    attach_lora(model, rank=lc["rank"], alpha=lc["alpha"],
                dropout=lc["dropout"], scaling=lc["scaling"])
    state = model.state_dict()
    for name, arr in tensors.items():
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)
    model.eval()
    return model


def save_denoiser(path, model: Denoiser, dcfg: DiffusionConfig, n_levels: int,
                  meta: dict | None = None):
    config = {
        "diffusion": {
            "n_train_steps": dcfg.n_train_steps, "beta_start": dcfg.beta_start,
            "beta_end": dcfg.beta_end, "n_sample_steps": dcfg.n_sample_steps,
            "learning_rate": dcfg.learning_rate, "epochs": dcfg.epochs,
            "batch_size": dcfg.batch_size, "hidden": dcfg.hidden,
            "seed": dcfg.seed,
        },
        "n_levels": n_levels,
    }
    save_checkpoint(path, "denoiser", config, model_tensors(model), meta=meta)


def load_denoiser(path) -> tuple:
    manifest, tensors = load_checkpoint(path)
    if manifest["kind"] != "denoiser":
        raise InvalidConfigError(f"{path} is a {manifest['kind']} checkpoint")
    dcfg = DiffusionConfig(**manifest["config"]["diffusion"])
    n_levels = manifest["config"]["n_levels"]
    model = Denoiser(conditioning_channels(n_levels), hidden=dcfg.hidden)
    load_model_tensors(model, tensors)
    model.eval()
    return model, dcfg, n_levels


# --- climatology files --------------------------------------------------------

CLIM_VARS = ["pm1_thr", "pm2p5_thr", "pm10_thr",
             "pm1_spread", "pm2p5_spread", "pm10_spread"]


def save_climatology(clim: Climatology, path):
    fields = np.concatenate([clim.thresholds, clim.spread], axis=-1)
    scg.write_surface_file(
        fields.astype(np.float32), CLIM_VARS, clim.grid, path,
        timestamps=list(range(clim.n_buckets)),
        extra_header={"climatology": True,
                      "period_hours": clim.period_hours,
                      "n_buckets": clim.n_buckets})


def load_climatology(path) -> Climatology:
    raw = scg.read_grid_file(path)
    h = raw.header
    if not h.get("climatology"):
        raise InvalidConfigError(f"{path} is not a climatology file")
    fields = raw.surface.astype(np.float64)
    return Climatology(fields[..., :3], fields[..., 3:],
                       h["period_hours"], h["n_buckets"], raw.grid)


# --- inference ----------------------------------------------------------------


@dataclass
class DeeBundle:
    denoiser: Denoiser
    dcfg: DiffusionConfig
    clim: Climatology
    delta: float = 1.0
    ensemble: int = 1
    seed: int = 0


def refine_prediction(pred_norm: AtmosphericState, stats: NormalizationStats,
                      dee: DeeBundle) -> tuple:
    """Gate the diffusion-refined PM into the deterministic prediction.

    Returns (physical surface fields [H, W, 7], refinement mask [H, W, 3])."""
    cond = build_conditioning(pred_norm)
    if dee.ensemble > 1:
        refined_norm = denoise_ensemble_mean(cond, dee.denoiser, dee.dcfg,
                                             dee.seed, dee.ensemble)
    else:
        refined_norm = denoise_sample(cond, dee.denoiser, dee.dcfg, dee.seed)
    pred_phys = denormalize_state(pred_norm, stats)
    pred_pm = pred_phys.surface[:, :, 4:].astype(np.float64)
    # clamp the sample to the meaningful part of the log range before
    # exponentiating: 1.5 is already 10^6 times the floor concentration
    refined_norm = np.clip(refined_norm, 0.0, 1.5)
    refined_pm = pm_log_inverse(refined_norm, stats.pm_floor, stats.pm_span)
    final_pm, mask = climatology_gate(pred_pm, refined_pm, dee.clim,
                                      pred_norm.timestamp, delta=dee.delta)
    surface = pred_phys.surface.copy()
    surface[:, :, 4:] = final_pm.astype(np.float32)
    return surface, mask


def run_forecast(model: Backbone, initial_phys: AtmosphericState,
                 stats: NormalizationStats, n_steps: int, step_hours: int,
                 dee: DeeBundle | None = None) -> tuple:
    """Autoregressive forecast from a physical initial state.

    Returns (surface fields [T, H, W, 8] physical + provenance channel,
    physical predicted states). Refinement never feeds back into the rollout.
    """
    state_norm = normalize_state(initial_phys, stats)
    preds_norm = rollout(model, state_norm, n_steps, step_hours=step_hours)
    out = np.zeros((n_steps, initial_phys.grid.n_lat, initial_phys.grid.n_lon,
                    len(FORECAST_VARS)), dtype=np.float32)
    states_phys = []
    for k, pn in enumerate(preds_norm):
        if dee is not None:
            surface, mask = refine_prediction(pn, stats, dee)
            out[k, :, :, :7] = surface
            out[k, :, :, 7] = mask.any(axis=-1).astype(np.float32)
        else:
            surface = denormalize_state(pn, stats).surface
            out[k, :, :, :7] = surface
        states_phys.append(AtmosphericState(
            denormalize_state(pn, stats).upper, out[k, :, :, :7].copy(),
            pn.timestamp, pn.grid))
    return out, states_phys


def write_forecast(path, fields: np.ndarray, grid: GridSpec, timestamps,
                   step_hours: int):
    scg.write_surface_file(fields, FORECAST_VARS, grid, path,
                           timestamps=timestamps, step_hours=step_hours,
                           extra_header={"forecast": True})


def read_forecast_states(path) -> list:
    """Forecast SCG1 file -> surface-only states (upper filled with zeros)."""
    raw = scg.read_grid_file(path)
    ts = raw.header.get("timestamps") or [
        k * raw.header["step_hours"] for k in range(raw.header["n_steps"])]
    grid = raw.grid
    states = []
    for k in range(raw.header["n_steps"]):
        surface = raw.surface[k][:, :, :7]
        upper = np.zeros((1, grid.n_lat, grid.n_lon, 5), dtype=np.float32)
        states.append(AtmosphericState(surface=surface, upper=upper,
                                       timestamp=int(ts[k]), grid=grid))
    return states
