import numpy as np
import pytest

from bsdelab import build_grid, simulate_brownian


@pytest.fixture(scope="session")
def bm_batch():
    """Shared Brownian batch on [0, 1]: 40k paths, 64 steps."""
    return simulate_brownian(40000, build_grid(0.0, 1.0, 64), d=1, seed=101)


@pytest.fixture(scope="session")
def bm_batch_small():
    return simulate_brownian(4000, build_grid(0.0, 1.0, 32), d=1, seed=202)


@pytest.fixture(scope="session")
def zero_rho(bm_batch):
    return np.zeros((bm_batch.n_paths, bm_batch.n_steps + 1))
