import numpy as np
import pytest
import torch

from syncast.grid import AtmosphericState, GridSpec, VariableCatalog


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(4)


@pytest.fixture
def grid8():
    return GridSpec.regular(8, 8, 1.0)


@pytest.fixture
def catalog2():
    return VariableCatalog(pressure_levels_hpa=(1000.0, 500.0))


def random_state(grid, n_levels=2, seed=0, timestamp=0):
    rng = np.random.default_rng(seed)
    upper = rng.normal(size=(n_levels, grid.n_lat, grid.n_lon, 5))
    upper[:, :, :, 1] = np.abs(upper[:, :, :, 1])  # humidity >= 0
    surface = rng.normal(size=(grid.n_lat, grid.n_lon, 7))
    surface[:, :, 4:] = np.abs(surface[:, :, 4:]) * 1e-8  # PM >= 0
    return AtmosphericState(upper.astype(np.float32),
                            surface.astype(np.float32), timestamp, grid)
