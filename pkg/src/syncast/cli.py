"""Command-line surface: gen-data, train, finetune, train-dee, infer,
rollout, evaluate, plot.

Every command writes into a run directory named by the content hash of its
fully resolved configuration, next to which the resolved config itself is
stored, so identical invocations reproduce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline, scg
from .backbone import Backbone, ModelConfig, crop_to_region, forward_state
from .diffusion import DiffusionConfig, build_climatology, train_dee
from .errors import (
    AlignmentError,
    FileFormatError,
    InvalidConfigError,
    InvalidGridError,
    InvalidRegionError,
    InvalidValueError,
    ShapeError,
    SyncastError,
    TrainingDivergedError,
)
from .grid import RegionSpec, crop_region, normalize_state
from .lora import attach_lora
from .render import render_field
from .runconfig import config_hash, load_config_file, resolve_config, write_resolved
from .training import (
    TrainConfig,
    finetune_lora,
    make_optimizer,
    optimizer_state_tensors,
    restore_optimizer_state,
    train_backbone,
)
from .verification import HIGH_QUANTILES, QUARTILES, evaluate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

_CONFIG_ERRORS = (InvalidConfigError, InvalidGridError, InvalidRegionError,
                  InvalidValueError, ShapeError, AlignmentError)


def _apply_thread_cap():
    cap = os.environ.get("SYNCAST_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"], epochs=t["epochs"],
        batch_size=t["batch_size"], smooth_l1_delta=t["smooth_l1_delta"],
        surface_var_weights=tuple(t["surface_var_weights"]),
        upper_var_weights=tuple(t["upper_var_weights"]),
        seed=cfg["seed"]).validate()


def _diffusion_config(cfg: dict) -> DiffusionConfig:
    d = cfg["diffusion"]
    return DiffusionConfig(
        n_train_steps=d["n_train_steps"], beta_start=d["beta_start"],
        beta_end=d["beta_end"], n_sample_steps=d["n_sample_steps"],
        learning_rate=d["learning_rate"], epochs=d["epochs"],
        batch_size=d["batch_size"], hidden=d["hidden"],
        seed=cfg["seed"]).validate()


def _model_config(cfg: dict, n_levels: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        embed_dim=m["embed_dim"], encoder_depth=m["encoder_depth"],
        decoder_depth=m["decoder_depth"], heads=m["heads"],
        window=tuple(m["window"]), dropout=m["dropout"], n_levels=n_levels)


def _resolve(args) -> dict:
    user = load_config_file(args.config) if args.config else None
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if getattr(args, "lead_hours", None) is not None:
        overrides["lead_hours"] = args.lead_hours
    if getattr(args, "dee", None) is not None:
        overrides["dee"] = {"enabled": args.dee == "on"}
    if getattr(args, "delta", None) is not None:
        overrides.setdefault("dee", {})["delta"] = args.delta
    if getattr(args, "region", None) is not None:
        vals = [float(v) for v in args.region.split(",")]
        if len(vals) != 4:
            raise InvalidConfigError(
                "--region expects lat_min,lat_max,lon_min,lon_max")
        overrides["region"] = dict(zip(
            ("lat_min", "lat_max", "lon_min", "lon_max"), vals))
    if getattr(args, "data_dir", None) is not None:
        overrides["data_dir"] = str(args.data_dir)
    return resolve_config(user, overrides)


def _run_dir(cfg: dict, command: str, extra: dict | None = None) -> Path:
    payload = {"command": command, "config": cfg, "args": extra or {}}
    h = config_hash(payload)
    run_dir = Path(cfg["out_dir"]) / f"{command}-{h}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, run_dir)
    return run_dir


# --- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    run_dir = _run_dir(cfg, "gen-data")
    pipeline.generate_dataset(cfg, run_dir)
    print(run_dir)
    return EXIT_OK


def _load_training_inputs(cfg: dict):
    if not cfg["data_dir"]:
        raise InvalidConfigError("data_dir is required (point it at a gen-data run)")
    ds = pipeline.load_dataset(cfg["data_dir"])
    full_grid = ds.split("train")[0].grid
    region = pipeline.region_from_config(cfg, full_grid)
    pairs, grid = pipeline.normalized_pairs(ds, "train", cfg["lead_hours"],
                                            region)
    return ds, pairs, grid, region, full_grid


def cmd_train(args) -> int:
    cfg = _resolve(args)
    run_dir = _run_dir(cfg, "train", {"resume": str(args.resume or "")})
    ds, pairs, grid, region, _ = _load_training_inputs(cfg)
    tc = _train_config(cfg)
    n_lat = region.padded_shape[0] if region else grid.n_lat
    n_lon = region.padded_shape[1] if region else grid.n_lon

    if args.resume:
        model, stats, step_hours, manifest, tensors = pipeline.load_backbone(
            args.resume)
        opt = make_optimizer(model.parameters(), tc)
        restore_optimizer_state(opt, tensors)
        start_epoch = manifest["meta"]["epochs_done"]
    else:
        torch.manual_seed(cfg["seed"])
        model = Backbone(_model_config(cfg, ds.manifest["n_levels"]),
                         n_lat, n_lon)
        opt = make_optimizer(model.parameters(), tc)
        start_epoch = 0

    history = train_backbone(pairs, model, tc,
                             log_path=run_dir / "loss.csv",
                             max_steps=cfg["train"]["max_steps"],
                             opt=opt, start_epoch=start_epoch)
    ckpt = run_dir / "backbone.scp"
    pipeline.save_backbone(ckpt, model, ds.stats, ds.manifest["step_hours"],
                           meta={"epochs_done": tc.epochs, "history": history},
                           extra_tensors=optimizer_state_tensors(opt))
    print(ckpt)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    run_dir = _run_dir(cfg, "finetune", {"checkpoint": str(args.checkpoint)})
    ds, pairs, grid, region, full_grid = _load_training_inputs(cfg)
    tc = _train_config(cfg)
    base, stats, step_hours, _, _ = pipeline.load_backbone(args.checkpoint)
    model = crop_to_region(base, region) if region else base
    lc = cfg["lora"]
    attach_lora(model, rank=lc["rank"], alpha=lc["alpha"],
                dropout=lc["dropout"], scaling=lc["scaling"])
    torch.manual_seed(cfg["seed"])
    finetune_lora(model, pairs, tc, log_path=run_dir / "loss.csv",
                  max_steps=cfg["train"]["max_steps"])
    out = run_dir / "adapters.scp"
    pipeline.save_adapters(out, model, lc, args.checkpoint)
    print(out)
    return EXIT_OK


def cmd_train_dee(args) -> int:
    cfg = _resolve(args)
    run_dir = _run_dir(cfg, "train-dee", {"checkpoint": str(args.checkpoint)})
    ds, pairs, grid, region, full_grid = _load_training_inputs(cfg)
    model, stats, step_hours, _, _ = pipeline.load_backbone(args.checkpoint)
    dc = _diffusion_config(cfg)

    from .diffusion import build_conditioning
    from .grid import PM_SURFACE_SLICE
    dee_pairs = []
    for x, y in pairs:
        pred = forward_state(model, x, step_hours=step_hours)
        dee_pairs.append((build_conditioning(pred),
                          y.surface[:, :, PM_SURFACE_SLICE]))
    denoiser, history = train_dee(dee_pairs, dc, ds.manifest["n_levels"],
                                  max_steps=cfg["diffusion"]["max_steps"],
                                  log_path=run_dir / "loss.csv")
    out = run_dir / "denoiser.scp"
    pipeline.save_denoiser(out, denoiser, dc, ds.manifest["n_levels"])

    clim_states = ds.split("train")
    if region:
        clim_states = [crop_region(s, region) for s in clim_states]
    clim = build_climatology(clim_states, cfg["climatology"]["period_hours"],
                             cfg["climatology"]["n_buckets"])
    pipeline.save_climatology(clim, run_dir / "climatology.scg")
    print(out)
    return EXIT_OK


def _prepare_inference(cfg, args):
    model, stats, step_hours, _, _ = pipeline.load_backbone(args.checkpoint)
    init_states = scg.read_grid_file(args.input).to_states()
    initial = init_states[args.index]
    region = pipeline.region_from_config(cfg, initial.grid)
    if region is not None:
        model = crop_to_region(model, region)
        initial = crop_region(initial, region)
    if args.adapters:
        pipeline.load_adapters_onto(model, args.adapters)
    dee = None
    if cfg["dee"]["enabled"]:
        if not (args.dee_checkpoint and args.climatology):
            raise InvalidConfigError(
                "--dee on requires --dee-checkpoint and --climatology")
        denoiser, dcfg, _ = pipeline.load_denoiser(args.dee_checkpoint)
        clim = pipeline.load_climatology(args.climatology)
        dee = pipeline.DeeBundle(denoiser, dcfg, clim,
                                 delta=cfg["dee"]["delta"],
                                 ensemble=cfg["dee"]["ensemble"],
                                 seed=cfg["seed"])
    return model, stats, step_hours, initial, dee


def _forecast_command(args, n_steps: int, command: str) -> int:
    cfg = _resolve(args)
    run_dir = _run_dir(cfg, command, {
        "checkpoint": str(args.checkpoint), "input": str(args.input),
        "index": args.index, "steps": n_steps,
        "adapters": str(args.adapters or ""),
        "dee_checkpoint": str(args.dee_checkpoint or ""),
        "climatology": str(args.climatology or "")})
    model, stats, step_hours, initial, dee = _prepare_inference(cfg, args)
    fields, states = pipeline.run_forecast(model, initial, stats, n_steps,
                                           step_hours, dee=dee)
    out = run_dir / "forecast.scg"
    ts = [s.timestamp for s in states]
    pipeline.write_forecast(out, fields, initial.grid, ts, step_hours)
    print(out)
    return EXIT_OK


def cmd_infer(args) -> int:
    return _forecast_command(args, 1, "infer")


def cmd_rollout(args) -> int:
    return _forecast_command(args, args.steps, "rollout")


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    run_dir = _run_dir(cfg, "evaluate", {
        "forecast": [str(p) for p in args.forecast], "truth": str(args.truth)})
    truth = scg.read_grid_file(args.truth).to_states()
    t_by_ts = {s.timestamp: s for s in truth}
    forecasts = {}
    grid = None
    for fpath in args.forecast:
        step_hours = scg.read_grid_file(fpath).header["step_hours"]
        for k, s in enumerate(pipeline.read_forecast_states(fpath)):
            if s.timestamp not in t_by_ts:
                raise AlignmentError(
                    f"forecast timestamp {s.timestamp} missing from truth")
            forecasts.setdefault((k + 1) * step_hours, []).append(s)
            grid = s.grid
    masks = {}
    for spec in args.mask or []:
        name, _, path = spec.partition("=")
        raw = scg.read_grid_file(path)
        masks[name] = raw.surface[0, :, :, 0] > 0.5
    rq = HIGH_QUANTILES if cfg["metrics"]["rqe_quantiles"] == "high" else QUARTILES
    report = evaluate(forecasts, truth, grid, masks=masks or None,
                      sedi_percentiles=tuple(cfg["metrics"]["sedi_percentiles"]),
                      rqe_quantiles=rq)
    report.to_csv(run_dir / "report.csv")
    report.to_json(run_dir / "report.json")
    print(run_dir / "report.csv")
    return EXIT_OK


def cmd_plot(args) -> int:
    cfg = _resolve(args)
    run_dir = _run_dir(cfg, "plot", {
        "input": str(args.input), "variable": args.variable,
        "timestep": args.timestep, "diff": str(args.diff or "")})
    raw = scg.read_grid_file(args.input)
    names = list(raw.header["surface_vars"])
    if args.variable not in names:
        raise InvalidConfigError(
            f"variable {args.variable!r} not in file (has {names})")
    k = names.index(args.variable)
    field = raw.surface[args.timestep, :, :, k]
    vmin, vmax = cfg["plot"]["vmin"], cfg["plot"]["vmax"]
    out = run_dir / f"{args.variable}_t{args.timestep}.ppm"
    render_field(field, out, vmin=vmin, vmax=vmax)
    if args.diff:
        other = scg.read_grid_file(args.diff)
        onames = list(other.header["surface_vars"])
        if args.variable not in onames:
            raise InvalidConfigError(
                f"variable {args.variable!r} not in diff file")
        diff = field.astype(np.float64) \
            - other.surface[args.timestep, :, :, onames.index(args.variable)]
        lim = max(abs(float(diff.min())), abs(float(diff.max())), 1e-30)
        render_field(diff, run_dir / f"{args.variable}_t{args.timestep}_diff.ppm",
                     vmin=-lim, vmax=lim, diverging=True)
    print(out)
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="syncast")
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False, infer=False):
        sp.add_argument("--region",
                        help="lat_min,lat_max,lon_min,lon_max")
        sp.add_argument("--lead-hours", type=int)
        sp.add_argument("--dee", choices=["on", "off"])
        sp.add_argument("--delta", type=float)
        if data:
            sp.add_argument("--data-dir")
        if infer:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--adapters")
            sp.add_argument("--dee-checkpoint")
            sp.add_argument("--climatology")
            sp.add_argument("--input", required=True)
            sp.add_argument("--index", type=int, default=0)

    sp = sub.add_parser("gen-data")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train")
    common(sp, data=True)
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune")
    common(sp, data=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("train-dee")
    common(sp, data=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_train_dee)

    sp = sub.add_parser("infer")
    common(sp, infer=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("rollout")
    common(sp, infer=True)
    sp.add_argument("--steps", type=int, default=1)
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("evaluate")
    common(sp)
    sp.add_argument("--forecast", action="append", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--mask", action="append",
                    help="name=mask.scg (first variable > 0.5)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plot")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--variable", required=True)
    sp.add_argument("--timestep", type=int, default=0)
    sp.add_argument("--diff")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except SyncastError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
