"""Bit-exact "SCG1" grid file format.

Layout: 4 ASCII magic bytes "SCG1"; u32 little-endian header byte length L;
UTF-8 JSON header; payload of float32 little-endian tensors (per timestep:
upper tensor then surface tensor, row-major in layout "t,z?,lat,lon,var");
trailing u32 CRC-32 (IEEE) of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChecksumError,
    HeaderError,
    InvalidValueError,
    MagicMismatchError,
    TruncatedPayloadError,
)
from .grid import AtmosphericState, GridSpec, SURFACE_VARS, UPPER_VARS

MAGIC = b"SCG1"
REQUIRED_KEYS = ("version", "n_steps", "step_hours", "z_levels", "n_lat",
                 "n_lon", "lat_deg", "lon_deg", "upper_vars", "surface_vars",
                 "dtype", "layout")


@dataclass
class RawGridFile:
    """Parsed SCG1 contents before any interpretation as AtmosphericState."""

    header: dict
    upper: np.ndarray    # [T, Z, H, W, Cu] float32 (Z may be 0)
    surface: np.ndarray  # [T, H, W, Cs] float32

    @property
    def grid(self) -> GridSpec:
        h = self.header
        res = h.get("resolution_deg")
        if res is None:
            lat = np.asarray(h["lat_deg"], dtype=np.float64)
            lon = np.asarray(h["lon_deg"], dtype=np.float64)
            diffs = []
            if lat.size > 1:
                diffs.append(abs(lat[1] - lat[0]))
            if lon.size > 1:
                diffs.append(abs(lon[1] - lon[0]))
            res = diffs[0] if diffs else 1.0
        return GridSpec(h["n_lat"], h["n_lon"],
                        np.asarray(h["lat_deg"]), np.asarray(h["lon_deg"]),
                        float(res))

    def to_states(self) -> list:
        """Interpret the file as a sequence of AtmosphericState."""
        h = self.header
        if list(h["upper_vars"]) != list(UPPER_VARS):
            raise HeaderError(f"upper_vars {h['upper_vars']} is not the state catalog")
        if list(h["surface_vars"]) != list(SURFACE_VARS):
            raise HeaderError(f"surface_vars {h['surface_vars']} is not the state catalog")
        grid = self.grid
        ts = h.get("timestamps") or [k * h["step_hours"] for k in range(h["n_steps"])]
        return [AtmosphericState(self.upper[k], self.surface[k], int(ts[k]), grid)
                for k in range(h["n_steps"])]


def _build_header(grid: GridSpec, n_steps: int, step_hours: int, z_levels: int,
                  upper_vars, surface_vars, extra: dict | None) -> dict:
    header = {
        "version": 1,
        "n_steps": int(n_steps),
        "step_hours": int(step_hours),
        "z_levels": int(z_levels),
        "n_lat": int(grid.n_lat),
        "n_lon": int(grid.n_lon),
        "lat_deg": [float(v) for v in grid.lat_deg],
        "lon_deg": [float(v) for v in grid.lon_deg],
        "resolution_deg": float(grid.resolution_deg),
        "upper_vars": list(upper_vars),
        "surface_vars": list(surface_vars),
        "dtype": "f32le",
        "layout": "t,z?,lat,lon,var",
    }
    if extra:
        header.update(extra)
    return header


def _write(path, header: dict, upper: np.ndarray, surface: np.ndarray):
    if not (np.all(np.isfinite(upper)) and np.all(np.isfinite(surface))):
        raise InvalidValueError("refusing to write non-finite payload")
    upper = np.ascontiguousarray(upper, dtype="<f4")
    surface = np.ascontiguousarray(surface, dtype="<f4")
    chunks = []
    for k in range(header["n_steps"]):
        if upper.size:
            chunks.append(upper[k].tobytes())
        chunks.append(surface[k].tobytes())
    payload = b"".join(chunks)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def write_grid_file(states: list, path, step_hours: int | None = None):
    """Write a sequence of AtmosphericState; round trips bit-exactly."""
    if not states:
        raise InvalidValueError("cannot write an empty sequence")
    grid = states[0].grid
    z = states[0].upper.shape[0]
    ts = [int(s.timestamp) for s in states]
    if step_hours is None:
        step_hours = ts[1] - ts[0] if len(ts) > 1 else 1
    upper = np.stack([s.upper for s in states]).astype("<f4")
    surface = np.stack([s.surface for s in states]).astype("<f4")
    header = _build_header(grid, len(states), step_hours, z,
                           UPPER_VARS, SURFACE_VARS, {"timestamps": ts})
    _write(path, header, upper, surface)


def write_surface_file(fields: np.ndarray, var_names, grid: GridSpec, path,
                       timestamps=None, step_hours: int = 1,
                       extra_header: dict | None = None):
    """Surface-only SCG1 file (forecast outputs, climatology, masks)."""
    fields = np.asarray(fields, dtype="<f4")
    if fields.ndim != 4 or fields.shape[3] != len(var_names):
        raise InvalidValueError("fields must be [T, n_lat, n_lon, n_vars]")
    n_steps = fields.shape[0]
    extra = dict(extra_header or {})
    if timestamps is not None:
        extra["timestamps"] = [int(t) for t in timestamps]
    header = _build_header(grid, n_steps, step_hours, 0, [], var_names, extra)
    upper = np.zeros((n_steps, 0), dtype="<f4")
    _write(path, header, upper, fields)


def read_grid_file(path) -> RawGridFile:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic bytes {blob[:4]!r}, expected {MAGIC!r}")
    (hdr_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hdr_len:
        raise TruncatedPayloadError("file ends inside the JSON header")
    try:
        header = json.loads(blob[8:8 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"header is not valid UTF-8 JSON: {e}") from e
    for key in REQUIRED_KEYS:
        if key not in header:
            raise HeaderError(f"header missing required key {key!r}")
    if header["dtype"] != "f32le":
        raise HeaderError(f"unsupported dtype {header['dtype']!r}")

    n_steps = header["n_steps"]
    z = header["z_levels"]
    h, w = header["n_lat"], header["n_lon"]
    cu = len(header["upper_vars"])
    cs = len(header["surface_vars"])
    upper_elems = z * h * w * cu
    surf_elems = h * w * cs
    expected = 4 * n_steps * (upper_elems + surf_elems)
    payload = blob[8 + hdr_len:len(blob) - 4]
    if len(blob) < 8 + hdr_len + expected + 4:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes but header n_steps={n_steps} "
            f"requires {expected}")
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"payload size {len(payload)} disagrees with header n_steps={n_steps} "
            f"(expected {expected})")
    (crc_stored,) = struct.unpack("<I", blob[-4:])
    if (zlib.crc32(payload) & 0xFFFFFFFF) != crc_stored:
        raise ChecksumError("payload CRC-32 mismatch")

    data = np.frombuffer(payload, dtype="<f4")
    upper = np.empty((n_steps, z, h, w, cu), dtype=np.float32)
    surface = np.empty((n_steps, h, w, cs), dtype=np.float32)
    off = 0
    for k in range(n_steps):
        if upper_elems:
            upper[k] = data[off:off + upper_elems].reshape(z, h, w, cu)
            off += upper_elems
        surface[k] = data[off:off + surf_elems].reshape(h, w, cs)
        off += surf_elems
    if not (np.all(np.isfinite(upper)) and np.all(np.isfinite(surface))):
        raise InvalidValueError("file payload contains non-finite values")
    return RawGridFile(header, upper, surface)
