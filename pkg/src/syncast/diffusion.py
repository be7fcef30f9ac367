"""Diffusion-based extreme enhancement of the PM forecast.

A small conditional convolutional denoiser is trained to predict the noise
added to the true (normalized) PM field; the conditioning channels are the
deterministic model's outputs. At inference, gated refinement replaces the
deterministic PM value only at pixels whose prediction exceeds the local
climatological threshold plus a spread margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    InsufficientDataError,
    InvalidConfigError,
    SamplingFailureError,
    ShapeError,
    TrainingDivergedError,
)
from .grid import AtmosphericState, GridSpec, PM_SURFACE_SLICE, pm_log_inverse


@dataclass
class DiffusionConfig:
    n_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    n_sample_steps: int = 50
    learning_rate: float = 1e-6
    epochs: int = 5
    batch_size: int = 1
    hidden: int = 32
    seed: int = 0

    def validate(self):
        if not (0 < self.beta_start < self.beta_end < 1):
            raise InvalidConfigError("need 0 < beta_start < beta_end < 1")
        if self.n_sample_steps < 1 or self.n_sample_steps > self.n_train_steps:
            raise InvalidConfigError("n_sample_steps must lie in [1, N]")
        return self


class NoiseSchedule:
    """Linear beta schedule with cumulative alpha products."""

    def __init__(self, cfg: DiffusionConfig):
        cfg.validate()
        self.n = cfg.n_train_steps
        self.betas = np.linspace(cfg.beta_start, cfg.beta_end, self.n,
                                 dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)
        if not np.all(np.diff(self.alpha_bar) < 0) or \
                not np.all((self.alpha_bar > 0) & (self.alpha_bar < 1)):
            raise InvalidConfigError("alpha_bar must be strictly decreasing in (0,1)")

    def alpha_bar_at(self, i: int) -> float:
        """i is 1-based; alpha_bar(0) == 1 by convention."""
        if i == 0:
            return 1.0
        if not 1 <= i <= self.n:
            raise IndexError(f"diffusion step {i} outside [1, {self.n}]")
        return float(self.alpha_bar[i - 1])


def forward_noise(x0: np.ndarray, i: int, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> tuple:
    """x_i = sqrt(abar_i) x0 + sqrt(1 - abar_i) eps; returns (x_i, eps)."""
    if not 1 <= i <= schedule.n:
        raise IndexError(f"diffusion step {i} outside [1, {schedule.n}]")
    ab = schedule.alpha_bar_at(i)
    eps = rng.standard_normal(x0.shape)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, eps


def build_conditioning(pred: AtmosphericState) -> np.ndarray:
    """Stack the deterministic prediction into conditioning channels
    [H, W, 3 + 7 + Z*5]: PM first, full surface, upper flattened level-wise."""
    z = pred.upper.shape[0]
    pm = pred.surface[:, :, PM_SURFACE_SLICE]
    surf = pred.surface
    upper = np.transpose(pred.upper, (1, 2, 0, 3)).reshape(
        pred.surface.shape[0], pred.surface.shape[1], z * 5)
    return np.concatenate([pm, surf, upper], axis=-1).astype(np.float32)


def conditioning_channels(n_levels: int) -> int:
    return 3 + 7 + n_levels * 5


class Denoiser(nn.Module):
    """Conv net predicting the injected noise from (x_i, conditioning, step)."""

    def __init__(self, cond_channels: int, hidden: int = 32):
        super().__init__()
        self.cond_channels = cond_channels
        self.time_dim = hidden
        self.time_mlp = nn.Sequential(
            nn.Linear(hidden, hidden * 2), nn.SiLU(), nn.Linear(hidden * 2, hidden * 2))
        self.conv_in = nn.Conv2d(3 + cond_channels, hidden, 3, padding=1)
        self.conv_mid1 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_mid2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden, 3, 3, padding=1)
        self.act = nn.SiLU()

    def _time_embedding(self, i: torch.Tensor) -> torch.Tensor:
        half = self.time_dim // 2
        freqs = torch.exp(-math.log(10000.0) *
                          torch.arange(half, dtype=torch.float32) / (half - 1))
        ang = i.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor,
                i: torch.Tensor) -> torch.Tensor:
        # x [N, 3, H, W], cond [N, Cc, H, W], i [N] 1-based step indices
        emb = self.time_mlp(self._time_embedding(i))
        scale, shift = emb.chunk(2, dim=1)
        h = self.act(self.conv_in(torch.cat([x, cond], dim=1)))
        h = h * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.act(self.conv_mid1(h))
        h = h + self.act(self.conv_mid2(h))
        return self.conv_out(h)


def train_dee(pairs: list, cfg: DiffusionConfig, n_levels: int,
              max_steps: int | None = None, log_path=None) -> tuple:
    """Train the denoiser on (conditioning [H,W,Cc], target PM [H,W,3]) pairs.

    Returns (model, loss history per step). Seeded-deterministic.
    """
    cfg.validate()
    if not pairs:
        raise InvalidConfigError("no training pairs for the refiner")
    schedule = NoiseSchedule(cfg)
    cc = conditioning_channels(n_levels)
    if pairs[0][0].shape[-1] != cc:
        raise ShapeError(
            f"conditioning has {pairs[0][0].shape[-1]} channels, expected {cc}")
    torch.manual_seed(cfg.seed)
    model = Denoiser(cc, hidden=cfg.hidden)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           betas=(0.9, 0.999))
    cond = torch.stack([torch.from_numpy(np.ascontiguousarray(c)).float()
                        .permute(2, 0, 1) for c, _ in pairs])
    x0 = torch.stack([torch.from_numpy(np.ascontiguousarray(t)).float()
                      .permute(2, 0, 1) for _, t in pairs])
    n = cond.shape[0]
    ab = torch.from_numpy(schedule.alpha_bar).float()

    history = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        g = torch.Generator().manual_seed(cfg.seed * 1_000_003 + epoch)
        perm = torch.randperm(n, generator=g)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            i = torch.randint(1, schedule.n + 1, (idx.numel(),), generator=g)
            eps = torch.randn(x0[idx].shape, generator=g)
            a = ab[i - 1].sqrt()[:, None, None, None]
            b = (1 - ab[i - 1]).sqrt()[:, None, None, None]
            xi = a * x0[idx] + b * eps
            opt.zero_grad()
            pred = model(xi, cond[idx], i)
            loss = ((pred - eps) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"refiner loss non-finite at step {step}", step=step)
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    if log_path is not None:
        with open(log_path, "w") as f:
            f.write("step,loss\n")
            for k, v in enumerate(history):
                f.write(f"{k},{v}\n")
    return model, history


def sample_step_indices(cfg: DiffusionConfig, n_steps: int | None = None) -> list:
    """Descending 1-based step subsequence with a uniform stride."""
    k = n_steps or cfg.n_sample_steps
    idx = np.unique(np.linspace(1, cfg.n_train_steps, k).round().astype(int))
    return list(idx[::-1])


def denoise_sample(cond: np.ndarray, model, cfg: DiffusionConfig, seed: int,
                   n_steps: int | None = None, stochastic: bool = True) -> np.ndarray:
    """Reverse-diffuse a refined PM field [H, W, 3] from seeded noise.

    model may be any callable (x, cond, i) -> predicted noise; stochastic=False
    gives the noise-free (DDIM-style) trajectory used by closed-form checks.
    """
    cfg.validate()
    schedule = NoiseSchedule(cfg)
    steps = sample_step_indices(cfg, n_steps)
    h, w = cond.shape[0], cond.shape[1]
    g = torch.Generator().manual_seed(seed)
    x = torch.randn((1, 3, h, w), generator=g)
    c = torch.from_numpy(np.ascontiguousarray(cond)).float().permute(2, 0, 1)[None]

    with torch.no_grad():
        for k, i in enumerate(steps):
            j = steps[k + 1] if k + 1 < len(steps) else 0
            ab_i = schedule.alpha_bar_at(i)
            ab_j = schedule.alpha_bar_at(j)
            eps = model(x, c, torch.tensor([i]))
            if not torch.isfinite(eps).all():
                raise SamplingFailureError(
                    f"non-finite noise prediction at step {i}", step=i)
            x0_pred = (x - math.sqrt(1 - ab_i) * eps) / math.sqrt(ab_i)
            if stochastic and j > 0:
                # ancestral step over the strided subsequence
                sigma = math.sqrt((1 - ab_j) / (1 - ab_i)) * \
                    math.sqrt(1 - ab_i / ab_j)
                dir_coef = math.sqrt(max(1 - ab_j - sigma ** 2, 0.0))
                z = torch.randn(x.shape, generator=g)
                x = math.sqrt(ab_j) * x0_pred + dir_coef * eps + sigma * z
            else:
                x = math.sqrt(ab_j) * x0_pred + math.sqrt(1 - ab_j) * eps
            if not torch.isfinite(x).all():
                raise SamplingFailureError(
                    f"non-finite sample at step {i}", step=i)
    return x[0].permute(1, 2, 0).numpy().astype(np.float32)


def denoise_ensemble_mean(cond: np.ndarray, model, cfg: DiffusionConfig,
                          seed: int, n_members: int,
                          n_steps: int | None = None) -> np.ndarray:
    members = [denoise_sample(cond, model, cfg, seed + 7919 * m, n_steps=n_steps)
               for m in range(n_members)]
    return np.mean(members, axis=0).astype(np.float32)


# --- climatology and the gate -------------------------------------------------


@dataclass
class Climatology:
    """Per-pixel, per-calendar-bucket PM threshold (mean) and spread (std),
    in physical units."""

    thresholds: np.ndarray  # [n_buckets, H, W, 3]
    spread: np.ndarray      # [n_buckets, H, W, 3]
    period_hours: int
    n_buckets: int
    grid: GridSpec

    def bucket_of(self, timestamp: int) -> int:
        return (int(timestamp) % self.period_hours) * self.n_buckets \
            // self.period_hours


def build_climatology(states: list, period_hours: int, n_buckets: int,
                      grid: GridSpec | None = None) -> Climatology:
    """Per-bucket per-pixel mean and std of the PM channels (physical units)."""
    if n_buckets < 1 or period_hours < 1:
        raise InvalidConfigError("period and bucket count must be >= 1")
    if period_hours % n_buckets:
        raise InvalidConfigError("period_hours must divide by n_buckets")
    grid = grid or states[0].grid
    span = states[-1].timestamp - states[0].timestamp
    if span + 1 < period_hours:
        raise InsufficientDataError(
            f"sequence spans {span}h, less than one {period_hours}h period")
    groups = [[] for _ in range(n_buckets)]
    for s in states:
        b = (int(s.timestamp) % period_hours) * n_buckets // period_hours
        groups[b].append(s.surface[:, :, PM_SURFACE_SLICE])
    for b, grp in enumerate(groups):
        if not grp:
            raise InsufficientDataError(f"climatology bucket {b} is empty")
    thr = np.stack([np.mean(g, axis=0) for g in groups]).astype(np.float64)
    spread = np.stack([np.std(g, axis=0) for g in groups]).astype(np.float64)
    return Climatology(thr, spread, period_hours, n_buckets, grid)


def climatology_gate(pred_pm: np.ndarray, refined_pm: np.ndarray,
                     clim: Climatology, timestamp: int,
                     delta: float = 1.0) -> tuple:
    """Pixel-wise select (physical units): refined where the deterministic
    prediction exceeds threshold + delta * spread, deterministic elsewhere.

    Returns (final field, boolean refinement mask)."""
    if pred_pm.shape != refined_pm.shape or \
            pred_pm.shape[:2] != clim.thresholds.shape[1:3]:
        raise ShapeError("gate field shapes disagree with climatology grid")
    b = clim.bucket_of(timestamp)
    margin = clim.thresholds[b] + delta * clim.spread[b]
    with np.errstate(invalid="ignore"):
        mask = pred_pm > margin
    final = np.where(mask, refined_pm, pred_pm)
    return final.astype(pred_pm.dtype), mask
