"""Backbone training, regional adapter fine-tuning and gradient verification."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import Backbone, state_to_tensors
from .errors import (
    EmptyDatasetError,
    FrozenViolationError,
    InvalidConfigError,
    ShapeError,
    TrainingDivergedError,
)
from .lora import base_params_hash, lora_parameters

DEFAULT_SURFACE_WEIGHTS = (1.50, 0.77, 0.66, 3.00, 1.20, 1.20, 1.20)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 20
    batch_size: int = 4
    smooth_l1_delta: float = 1.0
    surface_var_weights: tuple = DEFAULT_SURFACE_WEIGHTS
    upper_var_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    seed: int = 0

    def validate(self):
        if self.learning_rate < 0:
            raise InvalidConfigError("learning_rate must be >= 0")
        if self.smooth_l1_delta <= 0:
            raise InvalidConfigError("smooth_l1_delta must be > 0")
        w = list(self.surface_var_weights) + list(self.upper_var_weights)
        if len(self.surface_var_weights) != 7 or len(self.upper_var_weights) != 5:
            raise InvalidConfigError("need 7 surface and 5 upper weights")
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise InvalidConfigError("weights must be >= 0 with at least one > 0")
        return self


def smooth_l1(x, y, delta: float = 1.0):
    """L2 below the transition point, L1 beyond it; C1 at |x-y| = delta."""
    if delta <= 0:
        raise InvalidConfigError("delta must be > 0")
    d = np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    return np.where(d < delta, 0.5 * d * d, delta * (d - 0.5 * delta))


def _smooth_l1_t(a: torch.Tensor, b: torch.Tensor, delta: float) -> torch.Tensor:
    d = (a - b).abs()
    return torch.where(d < delta, 0.5 * d * d, delta * (d - 0.5 * delta))


def weighted_forecast_loss(pred_upper: torch.Tensor, pred_surface: torch.Tensor,
                           tgt_upper: torch.Tensor, tgt_surface: torch.Tensor,
                           cfg: TrainConfig) -> torch.Tensor:
    """Per-channel mean smooth-L1 combined as sum(w_v * loss_v) / sum(w_v).

    Inputs are normalized tensors shaped [N, 5, Z, H, W] / [N, 7, H, W].
    """
    if pred_upper.shape != tgt_upper.shape or pred_surface.shape != tgt_surface.shape:
        raise ShapeError("prediction / target shapes disagree")
    delta = cfg.smooth_l1_delta
    dtype = pred_upper.dtype
    su = _smooth_l1_t(pred_upper, tgt_upper, delta).mean(dim=(0, 2, 3, 4))
    ss = _smooth_l1_t(pred_surface, tgt_surface, delta).mean(dim=(0, 2, 3))
    wu = torch.as_tensor(cfg.upper_var_weights, dtype=dtype)
    ws = torch.as_tensor(cfg.surface_var_weights, dtype=dtype)
    total = (su * wu).sum() + (ss * ws).sum()
    return total / (wu.sum() + ws.sum())


def pairs_to_tensors(pairs: list, dtype=torch.float32) -> tuple:
    """Stack normalized (input, target) state pairs into training tensors."""
    if not pairs:
        raise EmptyDatasetError("no training pairs")
    xu, xs, yu, ys = [], [], [], []
    for src, tgt in pairs:
        a, b = state_to_tensors(src, dtype)
        c, d = state_to_tensors(tgt, dtype)
        xu.append(a)
        xs.append(b)
        yu.append(c)
        ys.append(d)
    return (torch.cat(xu), torch.cat(xs), torch.cat(yu), torch.cat(ys))


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63 - 1)


def make_optimizer(parameters, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(list(parameters), lr=cfg.learning_rate,
                            betas=(0.9, 0.999))


def optimizer_state_tensors(opt: torch.optim.Adam) -> dict:
    """Adam moments and step counts as flat float32 arrays, keyed by the
    parameter's position (for checkpoint resume)."""
    out = {}
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"opt.p{i}.step"] = np.asarray(
            [float(st["step"])], dtype=np.float32)
        out[f"opt.p{i}.exp_avg"] = st["exp_avg"].detach().cpu().numpy()
        out[f"opt.p{i}.exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
    return out


def restore_optimizer_state(opt: torch.optim.Adam, tensors: dict):
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        key = f"opt.p{i}.step"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[key][0])),
            "exp_avg": torch.from_numpy(tensors[f"opt.p{i}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt.p{i}.exp_avg_sq"].copy()),
        }


def _run_loop(model: Backbone, tensors: tuple, cfg: TrainConfig,
              parameters, log_path=None, start_epoch: int = 0,
              max_steps: int | None = None,
              opt: torch.optim.Adam | None = None) -> list:
    xu, xs, yu, ys = tensors
    n = xu.shape[0]
    if opt is None:
        opt = make_optimizer(parameters, cfg)
    history = []
    rows = []
    step = 0
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        torch.manual_seed(_epoch_seed(cfg.seed, epoch))
        perm = torch.randperm(n)
        epoch_losses = []
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            opt.zero_grad()
            pu, ps = model(xu[idx], xs[idx])
            loss = weighted_forecast_loss(pu, ps, yu[idx], ys[idx], cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at step {step}", step=step)
            loss.backward()
            opt.step()
            val = float(loss.detach())
            epoch_losses.append(val)
            rows.append((step, epoch, val))
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        history.append(float(np.mean(epoch_losses)))
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "epoch", "loss"])
            w.writerows(rows)
    return history


def train_backbone(pairs: list, model: Backbone, cfg: TrainConfig,
                   log_path=None, max_steps: int | None = None,
                   opt: torch.optim.Adam | None = None,
                   start_epoch: int = 0) -> list:
    """Optimize all backbone parameters; returns per-epoch loss history.

    Seeded-deterministic for a fixed thread count; pairs are normalized
    (input, target) states. Passing opt/start_epoch resumes an earlier run
    at an epoch boundary, bit-exactly.
    """
    cfg.validate()
    dtype = next(model.parameters()).dtype
    tensors = pairs_to_tensors(pairs, dtype)
    return _run_loop(model, tensors, cfg, model.parameters(),
                     log_path=log_path, max_steps=max_steps,
                     opt=opt, start_epoch=start_epoch)


def finetune_lora(model: Backbone, pairs: list, cfg: TrainConfig,
                  log_path=None, max_steps: int | None = None) -> list:
    """Fine-tune only the adapter tensors; base weights are asserted frozen."""
    cfg.validate()
    params = list(lora_parameters(model))
    if not params:
        raise FrozenViolationError("model carries no adapters to fine-tune")
    frozen = [p for p in model.parameters()
              if p.requires_grad and not any(p is q for q in params)]
    if frozen:
        raise FrozenViolationError("base parameters are not frozen")
    before = base_params_hash(model)
    dtype = next(model.parameters()).dtype
    tensors = pairs_to_tensors(pairs, dtype)
    history = _run_loop(model, tensors, cfg, params,
                        log_path=log_path, max_steps=max_steps)
    if base_params_hash(model) != before:
        raise FrozenViolationError("base parameters changed during fine-tuning")
    return history


def grad_check(model: Backbone, pairs: list, cfg: TrainConfig,
               eps: float = 1e-5, nudge: float = 1e-3,
               floor: float = 1e-6) -> float:
    """Central finite differences vs autograd over every parameter.

    The model must be in float64; targets are nudged away from the smooth-L1
    kink so the loss is differentiable at the evaluation point. Gradients
    smaller than `floor` are compared absolutely: the difference quotient
    carries roundoff noise of about |loss| * eps_machine / eps (~1e-11 for a
    unit-scale loss), which would dominate any relative comparison there.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise InvalidConfigError("grad_check requires a float64 model")
    model.eval()
    xu, xs, yu, ys = pairs_to_tensors(pairs, torch.float64)

    # fix targets once, nudged away from the smooth-L1 kink at the current
    # prediction, so finite differences probe a smooth neighbourhood
    with torch.no_grad():
        pu0, ps0 = model(xu, xs)
        d = cfg.smooth_l1_delta
        tu = torch.where((pu0 - yu).abs().sub(d).abs() < nudge, yu + 2 * nudge, yu)
        ts = torch.where((ps0 - ys).abs().sub(d).abs() < nudge, ys + 2 * nudge, ys)

    def loss_fn():
        pu, ps = model(xu, xs)
        return weighted_forecast_loss(pu, ps, tu, ts, cfg)

    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(model.parameters()))
    max_rel = 0.0
    with torch.no_grad():
        for p, g in zip(model.parameters(), grads):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = float(loss_fn())
                flat[i] = orig - eps
                lm = float(loss_fn())
                flat[i] = orig
                fd = (lp - lm) / (2 * eps)
                denom = max(abs(fd), abs(float(gflat[i])), floor)
                max_rel = max(max_rel, abs(fd - float(gflat[i])) / denom)
    return max_rel
