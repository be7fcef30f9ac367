"""Seeded synthetic ERA5/CAMS-like sequences at desk scale.

The weather fields are smooth traveling waves; PM is carried by the surface
wind (parcel push with bilinear mass scatter), spread by flux-form diffusion,
fed by heavy-tailed point emissions and removed by a temperature-modulated
deposition term. Longitude is periodic, latitude clamped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDatasetError, InvalidConfigError
from .grid import AtmosphericState, GridSpec, VariableCatalog


@dataclass
class SyntheticConfig:
    seed: int = 0
    grid: GridSpec = field(default_factory=GridSpec.toy)
    n_steps: int = 64
    step_hours: int = 1
    emission_rate: float = 2e-8       # kg/m^3 impulse scale
    emission_tail_index: float = 1.5  # Pareto shape, > 1 for finite mean
    advection_gain: float = 0.2       # grid cells per step per unit wind
    diffusion_coeff: float = 0.05
    deposition_rate: float = 0.02
    n_sources: int = 6
    catalog: VariableCatalog = field(default_factory=VariableCatalog)

    def validate(self):
        if self.grid.n_lat < 1 or self.grid.n_lon < 1:
            raise InvalidConfigError("zero-area grid")
        if self.n_steps < 1:
            raise InvalidConfigError("n_steps must be >= 1")
        if self.emission_tail_index <= 1.0:
            raise InvalidConfigError("emission_tail_index must be > 1")
        if self.diffusion_coeff < 0 or self.diffusion_coeff > 0.24:
            raise InvalidConfigError("diffusion_coeff must lie in [0, 0.24]")
        if self.deposition_rate < 0 or self.deposition_rate >= 1:
            raise InvalidConfigError("deposition_rate must lie in [0, 1)")
        return self


def advect_field(pm: np.ndarray, u: np.ndarray, v: np.ndarray,
                 gain: float) -> np.ndarray:
    """One parcel-push advection step.

    Each cell's mass moves by (gain*v, gain*u) grid cells and is scattered
    bilinearly onto its destination neighbours, so total mass is conserved
    exactly (longitude wraps, latitude displacement is clamped to the edge).
    """
    n_lat, n_lon = pm.shape
    ii, jj = np.meshgrid(np.arange(n_lat), np.arange(n_lon), indexing="ij")
    di = np.clip(ii + gain * v, 0.0, n_lat - 1.0)
    dj = jj + gain * u  # wraps below

    i0 = np.floor(di).astype(np.int64)
    j0 = np.floor(dj).astype(np.int64)
    fi = di - i0
    fj = dj - j0
    i1 = np.minimum(i0 + 1, n_lat - 1)
    j1 = (j0 + 1) % n_lon
    j0 = j0 % n_lon

    out = np.zeros_like(pm, dtype=np.float64)
    np.add.at(out, (i0, j0), pm * (1 - fi) * (1 - fj))
    np.add.at(out, (i0, j1), pm * (1 - fi) * fj)
    np.add.at(out, (i1, j0), pm * fi * (1 - fj))
    np.add.at(out, (i1, j1), pm * fi * fj)
    return out


def diffuse_field(pm: np.ndarray, coeff: float) -> np.ndarray:
    """Flux-form 5-point diffusion: periodic in lon, zero-flux at lat edges.

    Written as a divergence of face fluxes, so the total is conserved to
    floating-point rounding.
    """
    if coeff == 0.0:
        return pm.astype(np.float64, copy=True)
    f = pm.astype(np.float64, copy=False)
    flux_e = np.roll(f, -1, axis=1) - f          # face to the east of each cell
    flux_s = np.zeros_like(f)
    flux_s[:-1, :] = f[1:, :] - f[:-1, :]        # face to the south (higher i)
    div = (flux_e - np.roll(flux_e, 1, axis=1)) + flux_s
    div[1:, :] -= flux_s[:-1, :]
    return f + coeff * div


def advect_diffuse_step(pm: np.ndarray, u: np.ndarray, v: np.ndarray,
                        gain: float, coeff: float) -> np.ndarray:
    return diffuse_field(advect_field(pm, u, v, gain), coeff)


class _WaveField:
    """Sum of a few random traveling waves; deterministic in (rng, t)."""

    def __init__(self, rng: np.random.Generator, grid: GridSpec,
                 mean: float, amp: float, n_modes: int = 4):
        self.mean = mean
        self.kx = rng.integers(1, 4, size=n_modes)
        self.ky = rng.integers(1, 4, size=n_modes)
        self.omega = rng.uniform(0.05, 0.3, size=n_modes)
        self.phase = rng.uniform(0, 2 * np.pi, size=n_modes)
        self.amp = amp * rng.uniform(0.3, 1.0, size=n_modes) / n_modes
        self.x = np.linspace(0, 2 * np.pi, grid.n_lon, endpoint=False)
        self.y = np.linspace(0, np.pi, grid.n_lat)

    def at(self, t: int) -> np.ndarray:
        yy, xx = np.meshgrid(self.y, self.x, indexing="ij")
        out = np.full(xx.shape, self.mean, dtype=np.float64)
        for k in range(len(self.amp)):
            out += self.amp[k] * np.sin(self.kx[k] * xx + self.ky[k] * yy
                                        + self.omega[k] * t + self.phase[k])
        return out


def gen_synthetic_sequence(cfg: SyntheticConfig) -> list:
    """Deterministic synthetic sequence; identical config => identical bits."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    grid = cfg.grid
    z = cfg.catalog.n_levels

    surf_waves = {
        "msl": _WaveField(rng, grid, 101325.0, 800.0),
        "u10": _WaveField(rng, grid, 0.0, 6.0),
        "v10": _WaveField(rng, grid, 0.0, 6.0),
        "t2m": _WaveField(rng, grid, 288.0, 12.0),
    }
    upper_waves = []
    for lev in range(z):
        level_scale = 1.0 + 0.5 * lev
        upper_waves.append({
            "z": _WaveField(rng, grid, 5000.0 * level_scale, 300.0),
            "q": _WaveField(rng, grid, 0.0, 1.0),  # mapped through exp below
            "u": _WaveField(rng, grid, 2.0 * lev, 8.0),
            "v": _WaveField(rng, grid, 0.0, 8.0),
            "t": _WaveField(rng, grid, 288.0 - 8.0 * lev, 10.0),
        })

    src_i = rng.integers(0, grid.n_lat, size=cfg.n_sources)
    src_j = rng.integers(0, grid.n_lon, size=cfg.n_sources)
    species_scale = np.array([0.3, 0.6, 1.0])  # pm1 <= pm2p5 <= pm10

    pm = np.zeros((3, grid.n_lat, grid.n_lon), dtype=np.float64)
    states = []
    for step in range(cfg.n_steps):
        surf = {name: w.at(step) for name, w in surf_waves.items()}

        # transport and removal act on last step's PM, then sources inject
        for s in range(3):
            pm[s] = advect_diffuse_step(pm[s], surf["u10"], surf["v10"],
                                        cfg.advection_gain, cfg.diffusion_coeff)
        # warm, stable air traps pollutants; cold air scavenges faster
        stability = 1.0 / (1.0 + np.exp(-(surf["t2m"] - 288.0) / 6.0))
        pm *= 1.0 - cfg.deposition_rate * (1.0 - stability)[None, :, :]

        if cfg.emission_rate > 0 and cfg.n_sources > 0:
            bursts = cfg.emission_rate * (
                1.0 + rng.pareto(cfg.emission_tail_index, size=cfg.n_sources))
            for k in range(cfg.n_sources):
                pm[:, src_i[k], src_j[k]] += species_scale * bursts[k]

        surface = np.stack([surf["msl"], surf["u10"], surf["v10"], surf["t2m"],
                            pm[0], pm[1], pm[2]], axis=-1)
        upper = np.empty((z, grid.n_lat, grid.n_lon, 5), dtype=np.float64)
        for lev in range(z):
            w = upper_waves[lev]
            upper[lev, :, :, 0] = w["z"].at(step)
            upper[lev, :, :, 1] = 5e-3 * np.exp(w["q"].at(step))
            upper[lev, :, :, 2] = w["u"].at(step)
            upper[lev, :, :, 3] = w["v"].at(step)
            upper[lev, :, :, 4] = w["t"].at(step)

        states.append(AtmosphericState(
            upper.astype(np.float32), surface.astype(np.float32),
            timestamp=step * cfg.step_hours, grid=grid).validate())
    return states


def make_training_pairs(seq: list, lead_hours: int) -> list:
    """(X_t, X_{t+lead}) pairs; lead must be a positive multiple of the cadence."""
    if lead_hours <= 0:
        raise InvalidConfigError("lead_hours must be positive")
    if len(seq) < 2:
        raise EmptyDatasetError("need at least 2 states to form pairs")
    cadence = seq[1].timestamp - seq[0].timestamp
    if cadence <= 0 or lead_hours % cadence != 0:
        raise InvalidConfigError(
            f"lead {lead_hours}h is not a multiple of the cadence {cadence}h")
    lead_steps = lead_hours // cadence
    if lead_steps >= len(seq):
        raise EmptyDatasetError(
            f"lead {lead_hours}h longer than the {len(seq)}-step sequence")
    return [(seq[k], seq[k + lead_steps]) for k in range(len(seq) - lead_steps)]
