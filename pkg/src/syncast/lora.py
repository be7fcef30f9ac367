"""Low-rank adapters for frozen linear maps.

Every attention projection and feed-forward linear map of the backbone can
be wrapped; the base weight stays frozen and the update is scale * B @ A
with B zero-initialized, so a fresh adapter set is an exact no-op.
"""

from __future__ import annotations

import copy
import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone
from .errors import ShapeError


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 16.0,
                 dropout: float = 0.1, scaling: bool = True):
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        # alpha is only meaningful as the alpha/r multiplier; scaling=False
        # gives the bare B@A update
        self.scale = alpha / rank if scaling else 1.0
        self.drop = nn.Dropout(dropout)
        d, k = base.out_features, base.in_features
        dtype = base.weight.dtype
        self.lora_a = nn.Parameter(torch.randn(rank, k, dtype=dtype) / rank)
        self.lora_b = nn.Parameter(torch.zeros(d, rank, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.linear(x, self.base.weight, self.base.bias)
        delta = F.linear(F.linear(self.drop(x), self.lora_a), self.lora_b)
        return out + self.scale * delta

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.lora_b @ self.lora_a)


def _adapted_linear_names(model: nn.Module) -> list:
    names = []
    for name, mod in model.named_modules():
        if isinstance(mod, nn.Linear) and (".attn." in name or ".mlp." in name):
            names.append(name)
    return names


def _get_parent(model: nn.Module, dotted: str) -> tuple:
    parts = dotted.split(".")
    parent = model
    for p in parts[:-1]:
        parent = getattr(parent, p) if not p.isdigit() else parent[int(p)]
    return parent, parts[-1]


def attach_lora(model: Backbone, rank: int = 8, alpha: float = 16.0,
                dropout: float = 0.1, scaling: bool = True) -> Backbone:
    """Wrap every attention / feed-forward linear map with an adapter pair.

    All pre-existing parameters are frozen; only lora_a / lora_b train.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    for name in _adapted_linear_names(model):
        parent, attr = _get_parent(model, name)
        base = getattr(parent, attr) if not attr.isdigit() else parent[int(attr)]
        wrapped = LoraLinear(base, rank=rank, alpha=alpha,
                             dropout=dropout, scaling=scaling)
        if attr.isdigit():
            parent[int(attr)] = wrapped
        else:
            setattr(parent, attr, wrapped)
    return model


def lora_parameters(model: nn.Module):
    for name, p in model.named_parameters():
        if "lora_a" in name or "lora_b" in name:
            yield p


def lora_state(model: nn.Module) -> dict:
    return {name: p.detach().clone() for name, p in model.named_parameters()
            if "lora_a" in name or "lora_b" in name}


def base_state(model: nn.Module) -> dict:
    return {name: p.detach().clone() for name, p in model.state_dict().items()
            if "lora_a" not in name and "lora_b" not in name}


def base_params_hash(model: nn.Module) -> str:
    """SHA-256 over the raw bytes of all non-adapter tensors (freeze check)."""
    state = model.state_dict()
    h = hashlib.sha256()
    # name under the wrapper ("qkv.base.weight") hashes like the bare
    # linear ("qkv.weight"), so the hash is stable across attach_lora
    named = sorted((name.replace(".base.", "."), name) for name in state
                   if "lora_a" not in name and "lora_b" not in name)
    for plain, name in named:
        t = state[name].detach().cpu().contiguous()
        h.update(plain.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def merge_lora(model: Backbone) -> Backbone:
    """Fold every adapter into its base weight: W <- W + scale * B @ A.

    Returns a plain Backbone; the adapted model is left untouched.
    """
    adapted = dict(model.named_modules())
    state = {}
    for name, tensor in model.state_dict().items():
        if "lora_a" in name or "lora_b" in name:
            continue
        if ".base." in name:
            plain = name.replace(".base.", ".")
            mod = adapted[name.rsplit(".base.", 1)[0]]
            if mod.lora_a.shape[1] != mod.base.in_features or \
                    mod.lora_b.shape[0] != mod.base.out_features:
                raise ShapeError(f"adapter shape mismatch at {plain}")
            if name.endswith(".weight"):
                state[plain] = mod.merged_weight().detach().clone()
            else:
                state[plain] = tensor.detach().clone()
        else:
            state[name] = tensor.detach().clone()
    merged = Backbone(model.cfg, model.n_lat, model.n_lon)
    merged = merged.to(next(iter(state.values())).dtype)
    merged.load_state_dict(state)
    return merged
