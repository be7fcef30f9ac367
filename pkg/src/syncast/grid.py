"""Grids, variable catalog, region windows and normalization math.

Everything here is pure and operates on numpy arrays; the model modules
convert to torch at their own boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidGridError,
    InvalidRegionError,
    InvalidStatsError,
    InvalidValueError,
    ShapeError,
)

SPATIAL_PATCH = 4

# PM log-transform constants: floor concentration and decade span mapping
# [1e-11, 1e-7] kg/m^3 onto [0, 1].
PM_LOG_FLOOR = 1e-11
PM_LOG_SPAN_DECADES = 4.0

SURFACE_VARS = ("msl", "u10", "v10", "t2m", "pm1", "pm2p5", "pm10")
SURFACE_UNITS = ("Pa", "m/s", "m/s", "K", "kg/m3", "kg/m3", "kg/m3")
UPPER_VARS = ("z", "q", "u", "v", "t")
UPPER_UNITS = ("m2/s2", "kg/kg", "m/s", "m/s", "K")
PM_SURFACE_SLICE = slice(4, 7)
Q_UPPER_INDEX = 1


@dataclass(frozen=True)
class GridSpec:
    """A regular lat/lon grid with uniform spacing on both axes."""

    n_lat: int
    n_lon: int
    lat_deg: np.ndarray
    lon_deg: np.ndarray
    resolution_deg: float

    def __post_init__(self):
        lat = np.asarray(self.lat_deg, dtype=np.float64)
        lon = np.asarray(self.lon_deg, dtype=np.float64)
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", lon)
        if self.n_lat <= 0 or self.n_lon <= 0:
            raise InvalidGridError("grid dimensions must be positive")
        if self.resolution_deg <= 0:
            raise InvalidGridError("resolution_deg must be positive")
        if lat.shape != (self.n_lat,) or lon.shape != (self.n_lon,):
            raise InvalidGridError("lat/lon array lengths disagree with n_lat/n_lon")
        if np.any(np.abs(lat) > 90.0):
            raise InvalidGridError("latitudes must lie in [-90, 90]")
        if np.any(lon < -180.0) or np.any(lon >= 360.0):
            raise InvalidGridError("longitudes must lie in [-180, 360)")
        for name, axis in (("lat", lat), ("lon", lon)):
            if axis.size > 1:
                d = np.diff(axis)
                if not (np.all(d > 0) or np.all(d < 0)):
                    raise InvalidGridError(f"{name} values must be strictly monotonic")
                if np.max(np.abs(np.abs(d) - self.resolution_deg)) > 1e-9:
                    raise InvalidGridError(
                        f"{name} spacing must equal resolution_deg within 1e-9"
                    )

    @staticmethod
    def regular(n_lat: int, n_lon: int, resolution_deg: float,
                lat0: float | None = None, lon0: float = 0.0) -> "GridSpec":
        if lat0 is None:
            # center the latitude band on the equator
            lat0 = -0.5 * resolution_deg * (n_lat - 1)
        lat = lat0 + resolution_deg * np.arange(n_lat)
        lon = lon0 + resolution_deg * np.arange(n_lon)
        return GridSpec(n_lat, n_lon, lat, lon, resolution_deg)

    @staticmethod
    def toy(n_lat: int = 32, n_lon: int = 64) -> "GridSpec":
        # global toy grid: one shared spacing on both axes, periodic in lon
        res = 360.0 / n_lon
        lat0 = -0.5 * res * (n_lat - 1)
        if abs(lat0) > 90.0:
            raise InvalidGridError("toy grid too tall for its longitude spacing")
        return GridSpec.regular(n_lat, n_lon, res, lat0=lat0)

    @staticmethod
    def era5() -> "GridSpec":
        return GridSpec.regular(721, 1440, 0.25, lat0=-90.0)


@dataclass(frozen=True)
class VariableCatalog:
    """Names, units and pressure levels for the joint state."""

    surface_vars: tuple = SURFACE_VARS
    surface_units: tuple = SURFACE_UNITS
    upper_vars: tuple = UPPER_VARS
    upper_units: tuple = UPPER_UNITS
    pressure_levels_hpa: tuple = (1000.0, 850.0, 500.0, 200.0)

    def __post_init__(self):
        if len(self.surface_vars) != 7:
            raise InvalidConfigHint("surface_vars must have exactly 7 entries")
        if tuple(self.surface_vars[4:]) != ("pm1", "pm2p5", "pm10"):
            raise InvalidConfigHint("last 3 surface variables must be the PM species")
        if len(self.upper_vars) != 5:
            raise InvalidConfigHint("upper_vars must have exactly 5 entries")
        if len(self.pressure_levels_hpa) < 2:
            raise InvalidConfigHint("need at least 2 pressure levels")

    @property
    def n_levels(self) -> int:
        return len(self.pressure_levels_hpa)

    @staticmethod
    def full_scale() -> "VariableCatalog":
        levels = (1000.0, 925.0, 850.0, 700.0, 600.0, 500.0, 400.0,
                  300.0, 250.0, 200.0, 150.0, 100.0, 50.0)
        return VariableCatalog(pressure_levels_hpa=levels)


class InvalidConfigHint(InvalidGridError):
    """Catalog misconfiguration (kept under the grid error family)."""


@dataclass
class AtmosphericState:
    """Upper-air [Z, n_lat, n_lon, 5] and surface [n_lat, n_lon, 7] fields
    at one timestamp on a declared grid."""

    upper: np.ndarray
    surface: np.ndarray
    timestamp: int
    grid: GridSpec

    def validate(self, physical: bool = True) -> "AtmosphericState":
        zu, hu, wu, cu = self.upper.shape
        hs, ws, cs = self.surface.shape
        if cu != 5 or cs != 7:
            raise ShapeError("state channel counts must be (5 upper, 7 surface)")
        if (hu, wu) != (self.grid.n_lat, self.grid.n_lon) or (hs, ws) != (hu, wu):
            raise ShapeError("state spatial dims disagree with grid")
        if not (np.all(np.isfinite(self.upper)) and np.all(np.isfinite(self.surface))):
            raise InvalidValueError("state contains non-finite values")
        if physical:
            if np.any(self.surface[:, :, PM_SURFACE_SLICE] < 0):
                raise InvalidValueError("PM concentrations must be >= 0")
            if np.any(self.upper[:, :, :, Q_UPPER_INDEX] < 0):
                raise InvalidValueError("specific humidity must be >= 0")
        return self

    def copy(self) -> "AtmosphericState":
        return AtmosphericState(self.upper.copy(), self.surface.copy(),
                                self.timestamp, self.grid)


@dataclass(frozen=True)
class RegionSpec:
    """A lat/lon window with its derived index crop and patch-aligned extent."""

    lat_min_deg: float
    lat_max_deg: float
    lon_min_deg: float
    lon_max_deg: float
    i0: int
    i1: int
    j0: int
    j1: int
    pad_to_patch: bool = True
    patch: int = SPATIAL_PATCH

    @property
    def n_lat(self) -> int:
        return self.i1 - self.i0

    @property
    def n_lon(self) -> int:
        return self.j1 - self.j0

    @property
    def padded_shape(self) -> tuple:
        if not self.pad_to_patch:
            return (self.n_lat, self.n_lon)
        p = self.patch
        return (-(-self.n_lat // p) * p, -(-self.n_lon // p) * p)

    @property
    def pad_lat(self) -> int:
        return self.padded_shape[0] - self.n_lat

    @property
    def pad_lon(self) -> int:
        return self.padded_shape[1] - self.n_lon

    @staticmethod
    def from_bounds(grid: GridSpec, lat_min: float, lat_max: float,
                    lon_min: float, lon_max: float,
                    pad_to_patch: bool = True) -> "RegionSpec":
        tol = 1e-9
        lat_mask = (grid.lat_deg >= lat_min - tol) & (grid.lat_deg <= lat_max + tol)
        lon_mask = (grid.lon_deg >= lon_min - tol) & (grid.lon_deg <= lon_max + tol)
        li = np.nonzero(lat_mask)[0]
        lj = np.nonzero(lon_mask)[0]
        if li.size == 0 or lj.size == 0:
            raise InvalidRegionError("region window selects no grid points")
        return RegionSpec(lat_min, lat_max, lon_min, lon_max,
                          int(li[0]), int(li[-1]) + 1,
                          int(lj[0]), int(lj[-1]) + 1,
                          pad_to_patch=pad_to_patch)

    @staticmethod
    def full_grid(grid: GridSpec, pad_to_patch: bool = True) -> "RegionSpec":
        return RegionSpec(float(grid.lat_deg.min()), float(grid.lat_deg.max()),
                          float(grid.lon_deg.min()), float(grid.lon_deg.max()),
                          0, grid.n_lat, 0, grid.n_lon, pad_to_patch=pad_to_patch)

    def check_inside(self, grid: GridSpec):
        if self.i0 < 0 or self.j0 < 0 or self.i1 > grid.n_lat or self.j1 > grid.n_lon:
            raise InvalidRegionError("region window exceeds parent grid")
        if self.i0 >= self.i1 or self.j0 >= self.j1:
            raise InvalidRegionError("region window is empty")


def subgrid(grid: GridSpec, region: RegionSpec) -> GridSpec:
    region.check_inside(grid)
    lat = grid.lat_deg[region.i0:region.i1]
    lon = grid.lon_deg[region.j0:region.j1]
    return GridSpec(region.n_lat, region.n_lon, lat, lon, grid.resolution_deg)


def lat_weights(grid: GridSpec) -> np.ndarray:
    """cos(latitude) weights; not normalized (metric formulas divide by the sum)."""
    w = np.cos(np.deg2rad(grid.lat_deg))
    # cos of exactly +-90 deg should be 0, kill rounding residue
    w[np.abs(np.abs(grid.lat_deg) - 90.0) < 1e-12] = 0.0
    return w


def crop_region(state: AtmosphericState, region: RegionSpec) -> AtmosphericState:
    """Exact sub-slice of a state; no interpolation, no padding."""
    region.check_inside(state.grid)
    upper = state.upper[:, region.i0:region.i1, region.j0:region.j1, :]
    surface = state.surface[region.i0:region.i1, region.j0:region.j1, :]
    return AtmosphericState(upper, surface, state.timestamp,
                            subgrid(state.grid, region))


def pad_field_to_patch(field: np.ndarray, region: RegionSpec,
                       lat_axis: int, lon_axis: int) -> np.ndarray:
    """Replicate edge rows/columns so spatial dims hit the patch-aligned extent."""
    pads = [(0, 0)] * field.ndim
    pads[lat_axis] = (0, region.pad_lat)
    pads[lon_axis] = (0, region.pad_lon)
    if region.pad_lat == 0 and region.pad_lon == 0:
        return field
    return np.pad(field, pads, mode="edge")


def pm_log_forward(x, floor: float = PM_LOG_FLOOR,
                   span: float = PM_LOG_SPAN_DECADES):
    """Compress PM concentrations: [floor, floor*10^span] kg/m^3 -> [0, 1].

    Values above the upper end exceed 1 on purpose so extremes stay
    distinguishable; negative inputs are floored.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise InvalidValueError("NaN PM concentration")
    return (np.log10(np.maximum(x, floor)) - np.log10(floor)) / span


def pm_log_inverse(y, floor: float = PM_LOG_FLOOR,
                   span: float = PM_LOG_SPAN_DECADES):
    y = np.asarray(y, dtype=np.float64)
    if np.any(np.isnan(y)):
        raise InvalidValueError("NaN normalized PM value")
    return floor * np.power(10.0, span * y)


def zscore_forward(x, mean, std):
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise InvalidStatsError("std must be > 0")
    return (np.asarray(x, dtype=np.float64) - mean) / std


def zscore_inverse(y, mean, std):
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise InvalidStatsError("std must be > 0")
    return np.asarray(y, dtype=np.float64) * std + mean


@dataclass
class NormalizationStats:
    """Per-variable mean/std for the z-scored channels plus the PM log
    constants. PM channels use only the log transform."""

    surface_mean: np.ndarray  # [4] met surface vars only
    surface_std: np.ndarray
    upper_mean: np.ndarray    # [5]
    upper_std: np.ndarray
    pm_floor: float = PM_LOG_FLOOR
    pm_span: float = PM_LOG_SPAN_DECADES

    def __post_init__(self):
        self.surface_mean = np.asarray(self.surface_mean, dtype=np.float64)
        self.surface_std = np.asarray(self.surface_std, dtype=np.float64)
        self.upper_mean = np.asarray(self.upper_mean, dtype=np.float64)
        self.upper_std = np.asarray(self.upper_std, dtype=np.float64)
        if np.any(self.surface_std <= 0) or np.any(self.upper_std <= 0):
            raise InvalidStatsError("std must be > 0 for every z-scored variable")
        if self.pm_floor <= 0:
            raise InvalidStatsError("pm_floor must be > 0")

    @staticmethod
    def fit(states: list) -> "NormalizationStats":
        surf = np.stack([s.surface for s in states])  # [T, H, W, 7]
        upper = np.stack([s.upper for s in states])   # [T, Z, H, W, 5]
        s_mean = surf[..., :4].mean(axis=(0, 1, 2))
        s_std = surf[..., :4].std(axis=(0, 1, 2))
        u_mean = upper.mean(axis=(0, 1, 2, 3))
        u_std = upper.std(axis=(0, 1, 2, 3))
        s_std = np.where(s_std > 0, s_std, 1.0)
        u_std = np.where(u_std > 0, u_std, 1.0)
        return NormalizationStats(s_mean, s_std, u_mean, u_std)

    def to_dict(self) -> dict:
        return {
            "surface_mean": self.surface_mean.tolist(),
            "surface_std": self.surface_std.tolist(),
            "upper_mean": self.upper_mean.tolist(),
            "upper_std": self.upper_std.tolist(),
            "pm_floor": self.pm_floor,
            "pm_span": self.pm_span,
        }

    @staticmethod
    def from_dict(d: dict) -> "NormalizationStats":
        return NormalizationStats(
            np.asarray(d["surface_mean"]), np.asarray(d["surface_std"]),
            np.asarray(d["upper_mean"]), np.asarray(d["upper_std"]),
            pm_floor=float(d.get("pm_floor", PM_LOG_FLOOR)),
            pm_span=float(d.get("pm_span", PM_LOG_SPAN_DECADES)),
        )


def normalize_state(state: AtmosphericState, stats: NormalizationStats) -> AtmosphericState:
    """Met variables z-scored, PM channels log-compressed."""
    surface = np.empty_like(state.surface, dtype=np.float64)
    surface[..., :4] = zscore_forward(state.surface[..., :4],
                                      stats.surface_mean, stats.surface_std)
    surface[..., 4:] = pm_log_forward(state.surface[..., 4:],
                                      stats.pm_floor, stats.pm_span)
    upper = zscore_forward(state.upper, stats.upper_mean, stats.upper_std)
    return AtmosphericState(upper.astype(np.float32), surface.astype(np.float32),
                            state.timestamp, state.grid)


def denormalize_state(state: AtmosphericState, stats: NormalizationStats) -> AtmosphericState:
    surface = np.empty_like(state.surface, dtype=np.float64)
    surface[..., :4] = zscore_inverse(state.surface[..., :4],
                                      stats.surface_mean, stats.surface_std)
    surface[..., 4:] = pm_log_inverse(state.surface[..., 4:],
                                      stats.pm_floor, stats.pm_span)
    upper = zscore_inverse(state.upper, stats.upper_mean, stats.upper_std)
    return AtmosphericState(upper.astype(np.float32), surface.astype(np.float32),
                            state.timestamp, state.grid)
