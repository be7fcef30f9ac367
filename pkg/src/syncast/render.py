"""Deterministic raster rendering of gridded fields to binary PPM (P6).

The value-to-color mapping is a fixed lookup anchored to configured physical
bounds, so identical inputs yield byte-identical images.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidValueError

# piecewise-linear "heat" ramp: black -> purple -> red -> orange -> white
_RAMP_STOPS = np.array([
    [0, 0, 0],
    [80, 0, 120],
    [200, 30, 30],
    [255, 160, 30],
    [255, 255, 255],
], dtype=np.float64)

# diverging ramp for difference maps: blue -> white -> red
_DIV_STOPS = np.array([
    [40, 60, 200],
    [255, 255, 255],
    [200, 40, 40],
], dtype=np.float64)


def _ramp_lut(stops: np.ndarray, n: int = 256) -> np.ndarray:
    pos = np.linspace(0.0, 1.0, len(stops))
    x = np.linspace(0.0, 1.0, n)
    lut = np.stack([np.interp(x, pos, stops[:, c]) for c in range(3)], axis=1)
    return np.clip(np.rint(lut), 0, 255).astype(np.uint8)

_HEAT_LUT = _ramp_lut(_RAMP_STOPS)
_DIV_LUT = _ramp_lut(_DIV_STOPS)


def field_to_rgb(field: np.ndarray, vmin: float, vmax: float,
                 diverging: bool = False) -> np.ndarray:
    if not np.all(np.isfinite(field)):
        raise InvalidValueError("cannot render non-finite field")
    if vmax <= vmin:
        raise InvalidValueError("vmax must exceed vmin")
    t = np.clip((np.asarray(field, dtype=np.float64) - vmin) / (vmax - vmin),
                0.0, 1.0)
    idx = np.minimum((t * 256).astype(np.int64), 255)
    lut = _DIV_LUT if diverging else _HEAT_LUT
    return lut[idx]


def write_ppm(rgb: np.ndarray, path):
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def render_field(field: np.ndarray, path, vmin: float | None = None,
                 vmax: float | None = None, diverging: bool = False):
    if vmin is None:
        vmin = float(np.min(field))
    if vmax is None:
        vmax = float(np.max(field))
    if vmax <= vmin:
        vmax = vmin + 1.0  # constant field renders a single color
    write_ppm(field_to_rgb(field, vmin, vmax, diverging=diverging), path)
