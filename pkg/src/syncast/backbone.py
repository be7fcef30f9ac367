"""Deterministic forecasting backbone.

A compact 3D earth-transformer: joint patch embedding of upper-air and
surface fields into one token tensor, non-overlapping window attention with
a positional bias indexed by absolute window position (so regional models
can reuse exact sub-blocks of the global bias table), and an independent
patch-recovery head.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AlignmentError, NumericFailureError, ShapeError
from .grid import (
    AtmosphericState,
    GridSpec,
    RegionSpec,
    SPATIAL_PATCH,
    subgrid,
)


@dataclass
class ModelConfig:
    embed_dim: int = 64
    encoder_depth: int = 2
    decoder_depth: int = 2
    heads: int = 4
    window: tuple = (2, 4, 4)
    upper_patch: tuple = (2, 4, 4)
    surface_patch: tuple = (4, 4)
    dropout: float = 0.0
    n_levels: int = 4
    n_upper_vars: int = 5
    n_surface_vars: int = 7

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ShapeError("embed_dim must divide by heads")
        if tuple(self.upper_patch)[1:] != tuple(self.surface_patch):
            raise ShapeError("upper and surface spatial patch sizes must agree")
        if self.surface_patch[0] != SPATIAL_PATCH:
            raise ShapeError(f"spatial patch must be {SPATIAL_PATCH}")

    @property
    def depth_tokens(self) -> int:
        # ceil(Z / level-patch) upper planes plus one surface plane
        return -(-self.n_levels // self.upper_patch[0]) + 1

    def token_grid(self, n_lat: int, n_lon: int) -> tuple:
        p = self.surface_patch[0]
        return (self.depth_tokens, -(-n_lat // p), -(-n_lon // p))

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim, "encoder_depth": self.encoder_depth,
            "decoder_depth": self.decoder_depth, "heads": self.heads,
            "window": list(self.window), "upper_patch": list(self.upper_patch),
            "surface_patch": list(self.surface_patch), "dropout": self.dropout,
            "n_levels": self.n_levels, "n_upper_vars": self.n_upper_vars,
            "n_surface_vars": self.n_surface_vars,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("window", "upper_patch", "surface_patch"):
            if k in d:
                d[k] = tuple(d[k])
        return ModelConfig(**d)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _pad_to_multiple(x: torch.Tensor, dims: tuple, multiples: tuple) -> torch.Tensor:
    """Replicate-pad the trailing side of the given dims to multiples."""
    for d, m in zip(dims, multiples):
        size = x.shape[d]
        extra = _ceil_div(size, m) * m - size
        if extra:
            last = x.narrow(d, size - 1, 1)
            x = torch.cat([x] + [last] * extra, dim=d)
    return x


class EarthWindowAttention(nn.Module):
    """Multi-head attention inside non-overlapping 3D windows with a learned
    bias per absolute window position (depth band, lat band, lon band)."""

    def __init__(self, dim: int, heads: int, window: tuple, n_bands: tuple,
                 dropout: float = 0.0):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.window = tuple(window)
        self.n_bands = tuple(n_bands)
        self.scale = (dim // heads) ** -0.5
        v = window[0] * window[1] * window[2]
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.bias = nn.Parameter(0.02 * torch.randn(*n_bands, heads, v, v))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [N, D, H, W, C] with D/H/W multiples of the window shape
        n, d, h, w, c = x.shape
        wd, wh, ww = self.window
        nd, nh, nw = d // wd, h // wh, w // ww
        bd, bh, bw = self.n_bands
        if (nd, nh, nw) != (bd, bh, bw):
            raise ShapeError(
                f"token grid windows {(nd, nh, nw)} disagree with bias bands {self.n_bands}")
        v = wd * wh * ww

        x = x.view(n, nd, wd, nh, wh, nw, ww, c)
        x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(n, nd * nh * nw, v, c)

        qkv = self.qkv(x).reshape(n, -1, v, 3, self.heads, c // self.heads)
        q, k, val = qkv.permute(3, 0, 1, 4, 2, 5)  # [N, nW, heads, v, hd]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn + self.bias.reshape(1, nd * nh * nw, self.heads, v, v)
        attn = attn.softmax(dim=-1)
        out = attn @ val  # [N, nW, heads, v, hd]
        out = out.permute(0, 1, 3, 2, 4).reshape(n, -1, v, c)
        out = self.drop(self.proj(out))

        out = out.view(n, nd, nh, nw, wd, wh, ww, c)
        out = out.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(n, d, h, w, c)
        return out


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: tuple, n_bands: tuple,
                 dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EarthWindowAttention(dim, heads, window, n_bands, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Dropout(dropout),
            nn.Linear(dim * 4, dim), nn.Dropout(dropout))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class Backbone(nn.Module):
    """Encoder-decoder over a fixed (padded) grid extent.

    The module is built for one grid extent; its bias tables cover that
    extent's window bands. crop_to_region produces a regional twin whose
    bias entries are bit-equal sub-blocks.
    """

    def __init__(self, cfg: ModelConfig, n_lat: int, n_lon: int):
        super().__init__()
        self.cfg = cfg
        self.n_lat = n_lat
        self.n_lon = n_lon
        c = cfg.embed_dim
        self.embed_upper = nn.Conv3d(cfg.n_upper_vars, c,
                                     kernel_size=cfg.upper_patch,
                                     stride=cfg.upper_patch)
        self.embed_surface = nn.Conv2d(cfg.n_surface_vars, c,
                                       kernel_size=cfg.surface_patch,
                                       stride=cfg.surface_patch)
        d_e, h_e, w_e = cfg.token_grid(n_lat, n_lon)
        self.tokens = (d_e, h_e, w_e)
        wd, wh, ww = cfg.window
        n_bands = (_ceil_div(d_e, wd), _ceil_div(h_e, wh), _ceil_div(w_e, ww))
        self.n_bands = n_bands
        depth = cfg.encoder_depth + cfg.decoder_depth
        self.blocks = nn.ModuleList([
            TransformerBlock(c, cfg.heads, cfg.window, n_bands, cfg.dropout)
            for _ in range(depth)])
        # patch recovery deliberately does not share embedding parameters
        self.recover_upper = nn.ConvTranspose3d(c, cfg.n_upper_vars,
                                                kernel_size=cfg.upper_patch,
                                                stride=cfg.upper_patch)
        self.recover_surface = nn.ConvTranspose2d(c, cfg.n_surface_vars,
                                                  kernel_size=cfg.surface_patch,
                                                  stride=cfg.surface_patch)

    # --- embedding / recovery -------------------------------------------------

    def embed(self, upper: torch.Tensor, surface: torch.Tensor) -> torch.Tensor:
        """upper [N, 5, Z, H, W], surface [N, 7, H, W] -> tokens
        [N, D_e, H_e, W_e, C]; inputs are replicate-padded to patch multiples."""
        pz, ph, pw = self.cfg.upper_patch
        upper = _pad_to_multiple(upper, (2, 3, 4), (pz, ph, pw))
        surface = _pad_to_multiple(surface, (2, 3), (ph, pw))
        tu = self.embed_upper(upper)               # [N, C, D_u, H_e, W_e]
        ts = self.embed_surface(surface)           # [N, C, H_e, W_e]
        tokens = torch.cat([tu, ts.unsqueeze(2)], dim=2)
        return tokens.permute(0, 2, 3, 4, 1).contiguous()

    def recover(self, tokens: torch.Tensor, out_shape: tuple) -> tuple:
        """tokens [N, D_e, H_e, W_e, C] -> (upper [N,5,Z,H,W], surface [N,7,H,W])
        sliced to the requested physical shape."""
        z, h, w = out_shape
        d_e = tokens.shape[1]
        if d_e != self.cfg.depth_tokens:
            raise ShapeError(
                f"token depth {d_e} != ceil(Z/{self.cfg.upper_patch[0]})+1 "
                f"= {self.cfg.depth_tokens}")
        t = tokens.permute(0, 4, 1, 2, 3)          # [N, C, D_e, H_e, W_e]
        upper = self.recover_upper(t[:, :, :-1])
        surface = self.recover_surface(t[:, :, -1])
        return upper[:, :, :z, :h, :w], surface[:, :, :h, :w]

    # --- forward --------------------------------------------------------------

    def forward(self, upper: torch.Tensor, surface: torch.Tensor) -> tuple:
        if upper.shape[-2:] != surface.shape[-2:]:
            raise ShapeError("upper and surface spatial dims disagree")
        z, h, w = upper.shape[2], upper.shape[3], upper.shape[4]
        x = self.embed(upper, surface)
        x = _pad_to_multiple(x, (1, 2, 3), self.cfg.window)
        for idx, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericFailureError(
                    f"non-finite activations after block {idx}", layer_index=idx)
        x = x[:, :self.tokens[0], :self.tokens[1], :self.tokens[2]]
        return self.recover(x, (z, h, w))


def crop_positional_bias(bias: torch.Tensor, band_window: tuple) -> torch.Tensor:
    """Slice a global bias table [Bd, Bh, Bw, heads, v, v] to the regional
    band window ((h0, h1), (w0, w1)); entries are bit-equal sub-blocks."""
    (h0, h1), (w0, w1) = band_window
    bd, bh, bw = bias.shape[:3]
    if h0 < 0 or w0 < 0 or h1 > bh or w1 > bw or h0 >= h1 or w0 >= w1:
        raise AlignmentError(
            f"band window {band_window} not inside global bias bands {(bh, bw)}")
    return bias[:, h0:h1, w0:w1].detach().clone()


def region_band_window(model: Backbone, region: RegionSpec) -> tuple:
    """Absolute band coordinates of a patch/window-aligned region."""
    cfg = model.cfg
    p = cfg.surface_patch[0]
    wh, ww = cfg.window[1], cfg.window[2]
    if region.i0 % (p * wh) or region.j0 % (p * ww):
        raise AlignmentError(
            "region origin must align to patch*window boundaries for bias crop")
    if region.i1 > model.n_lat or region.j1 > model.n_lon or region.i0 < 0:
        raise AlignmentError("region lies outside the grid the bias was built for")
    h_pad, w_pad = region.padded_shape
    h0 = region.i0 // (p * wh)
    w0 = region.j0 // (p * ww)
    h1 = h0 + _ceil_div(_ceil_div(h_pad, p), wh)
    w1 = w0 + _ceil_div(_ceil_div(w_pad, p), ww)
    return (h0, h1), (w0, w1)


def crop_to_region(model: Backbone, region: RegionSpec) -> Backbone:
    """Regional twin of a global model: shared weights, bias tables cropped
    by absolute window position."""
    h_pad, w_pad = region.padded_shape
    band_window = region_band_window(model, region)
    regional = Backbone(model.cfg, h_pad, w_pad)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for name in list(state):
        if name.endswith("attn.bias"):
            state[name] = crop_positional_bias(state[name], band_window)
    regional.load_state_dict(state)
    return regional


# --- state-level forward / rollout -------------------------------------------


def state_to_tensors(state: AtmosphericState, dtype=torch.float32) -> tuple:
    upper = torch.from_numpy(np.ascontiguousarray(state.upper)).to(dtype)
    surface = torch.from_numpy(np.ascontiguousarray(state.surface)).to(dtype)
    return (upper.permute(3, 0, 1, 2).unsqueeze(0),
            surface.permute(2, 0, 1).unsqueeze(0))


def tensors_to_state(upper: torch.Tensor, surface: torch.Tensor,
                     timestamp: int, grid: GridSpec) -> AtmosphericState:
    u = upper[0].permute(1, 2, 3, 0).detach().cpu().numpy().astype(np.float32)
    s = surface[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float32)
    return AtmosphericState(u, s, timestamp, grid)


def forward_state(model: Backbone, state: AtmosphericState,
                  step_hours: int = 1) -> AtmosphericState:
    """One deterministic step in normalized space (dropout off)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            upper, surface = state_to_tensors(
                state, dtype=next(model.parameters()).dtype)
            pu, ps = model(upper, surface)
    finally:
        if was_training:
            model.train()
    return tensors_to_state(pu, ps, state.timestamp + step_hours, state.grid)


def rollout(model: Backbone, state: AtmosphericState, n: int,
            step_hours: int = 1) -> list:
    """Autoregressive n-step forecast; rollout(x, 1) == forward(x) bit-exactly."""
    if n < 1:
        raise ShapeError("rollout length must be >= 1")
    out = []
    cur = state
    for k in range(n):
        try:
            cur = forward_state(model, cur, step_hours=step_hours)
        except NumericFailureError as e:
            raise NumericFailureError(
                f"numeric failure at rollout step {k}: {e}",
                layer_index=e.layer_index, step=k) from e
        out.append(cur)
    return out
