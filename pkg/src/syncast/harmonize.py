"""Spatial and temporal harmonization: bilinear regridding, block-mean
downsampling and linear temporal upsampling."""

from __future__ import annotations

import numpy as np

from .errors import InvalidConfigError, InvalidGridError, ShapeError
from .grid import AtmosphericState, GridSpec, lat_weights


def _fractional_index(dst_vals: np.ndarray, src_vals: np.ndarray) -> np.ndarray:
    """Map destination coordinates to (clamped) fractional source indices."""
    if src_vals.size < 2:
        raise InvalidGridError("source grid needs at least 2 points per axis")
    flip = src_vals[1] < src_vals[0]
    vals = src_vals[::-1] if flip else src_vals
    idx = np.interp(dst_vals, vals, np.arange(vals.size))
    if flip:
        idx = (vals.size - 1) - idx
    return np.clip(idx, 0.0, src_vals.size - 1.0)


def regrid_bilinear(field: np.ndarray, src: GridSpec, dst: GridSpec) -> np.ndarray:
    """Bilinear interpolation onto dst; exact for fields affine in lat/lon.

    Destination points outside the source hull are clamped to the edge.
    """
    if field.shape[:2] != (src.n_lat, src.n_lon):
        raise ShapeError("field shape disagrees with src grid")
    f = np.asarray(field, dtype=np.float64)
    yi = _fractional_index(dst.lat_deg, src.lat_deg)
    xi = _fractional_index(dst.lon_deg, src.lon_deg)

    y0 = np.floor(yi).astype(np.int64)
    x0 = np.floor(xi).astype(np.int64)
    y0 = np.minimum(y0, src.n_lat - 2)
    x0 = np.minimum(x0, src.n_lon - 2)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]

    f00 = f[np.ix_(y0, x0)]
    f01 = f[np.ix_(y0, x0 + 1)]
    f10 = f[np.ix_(y0 + 1, x0)]
    f11 = f[np.ix_(y0 + 1, x0 + 1)]
    out = ((1 - fy) * (1 - fx) * f00 + (1 - fy) * fx * f01
           + fy * (1 - fx) * f10 + fy * fx * f11)
    return out


def temporal_upsample_linear(seq: list, factor: int) -> list:
    """Insert factor-1 linear interpolants between consecutive states.

    Endpoints are kept bit-exactly; the cadence must divide by factor so the
    interpolated timestamps stay integer hours.
    """
    if factor < 1:
        raise InvalidConfigError("factor must be >= 1")
    if factor == 1:
        return list(seq)
    if len(seq) < 2:
        raise InvalidConfigError("need at least 2 states to upsample")
    cadence = seq[1].timestamp - seq[0].timestamp
    if cadence % factor != 0:
        raise InvalidConfigError(
            f"cadence {cadence}h does not divide by factor {factor}")
    sub = cadence // factor
    out = []
    for a, b in zip(seq[:-1], seq[1:]):
        out.append(a)
        du = b.upper.astype(np.float64) - a.upper.astype(np.float64)
        ds = b.surface.astype(np.float64) - a.surface.astype(np.float64)
        for k in range(1, factor):
            w = k / factor
            out.append(AtmosphericState(
                (a.upper + w * du).astype(np.float32),
                (a.surface + w * ds).astype(np.float32),
                a.timestamp + k * sub, a.grid))
    out.append(seq[-1])
    return out


def _block_factors(src: GridSpec, dst: GridSpec) -> tuple:
    if dst.n_lat > src.n_lat or dst.n_lon > src.n_lon:
        raise InvalidConfigError("dst grid must be coarser than src")
    if src.n_lat % dst.n_lat or src.n_lon % dst.n_lon:
        raise InvalidConfigError(
            "src dims must be integer multiples of dst dims for block averaging")
    return src.n_lat // dst.n_lat, src.n_lon // dst.n_lon


def block_lat_weights(src: GridSpec, dst: GridSpec) -> np.ndarray:
    """Aggregated cos-latitude weight of each coarse row (sum of its fine rows).

    These are the weights under which downsample_to_resolution conserves the
    weighted mean exactly.
    """
    fl, _ = _block_factors(src, dst)
    return lat_weights(src).reshape(dst.n_lat, fl).sum(axis=1)


def downsample_to_resolution(field: np.ndarray, src: GridSpec,
                             dst: GridSpec) -> np.ndarray:
    """Area-weighted block mean; conserves the lat-weighted mean of the field."""
    if field.shape[:2] != (src.n_lat, src.n_lon):
        raise ShapeError("field shape disagrees with src grid")
    fl, fn = _block_factors(src, dst)
    w = lat_weights(src)
    f = np.asarray(field, dtype=np.float64)
    wf = f * w[:, None]
    num = wf.reshape(dst.n_lat, fl, dst.n_lon, fn).sum(axis=(1, 3))
    # each coarse cell's weight: sum of its fine-row weights times block width
    den = w.reshape(dst.n_lat, fl).sum(axis=1)[:, None] * fn
    return num / den
