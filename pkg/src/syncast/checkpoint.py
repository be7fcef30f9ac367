"""Checkpoint files: JSON manifest + raw float32 little-endian payload with a
CRC-32 trailer. Adapter checkpoints reference the base file's content hash."""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np
import torch

from .errors import (
    ChecksumError,
    HeaderError,
    MagicMismatchError,
    TruncatedPayloadError,
)

MAGIC = b"SCP1"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, kind: str, config: dict, tensors: dict,
                    meta: dict | None = None):
    """tensors: name -> numpy array (stored as float32 little-endian)."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "f32le", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"version": 1, "kind": kind, "config": config,
                "meta": meta or {}, "tensors": entries}
    hdr = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> tuple:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise MagicMismatchError(f"bad checkpoint magic {blob[:4]!r}")
    (hdr_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hdr_len + 4:
        raise TruncatedPayloadError("checkpoint ends inside header")
    try:
        manifest = json.loads(blob[8:8 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"checkpoint manifest is not valid JSON: {e}") from e
    payload = blob[8 + hdr_len:-4]
    (crc_stored,) = struct.unpack("<I", blob[-4:])
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc_stored:
        raise ChecksumError("checkpoint payload CRC-32 mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        end = start + 4 * n
        if end > len(payload):
            raise TruncatedPayloadError(f"tensor {e['name']} exceeds payload")
        tensors[e["name"]] = np.frombuffer(
            payload[start:end], dtype="<f4").reshape(e["shape"]).copy()
    return manifest, tensors


def model_tensors(model: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_model_tensors(model: torch.nn.Module, tensors: dict):
    dtype = next(model.parameters()).dtype
    state = {k: torch.from_numpy(v).to(dtype) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model
