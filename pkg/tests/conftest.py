import numpy as np
import pytest

from bsvsim.dispersion import CrystalConfig, PumpConfig
from bsvsim.gain import SpectralGrid


@pytest.fixture(scope="session")
def pump():
    return PumpConfig()


@pytest.fixture(scope="session")
def crystal():
    return CrystalConfig()


@pytest.fixture(scope="session")
def wide_grid():
    return SpectralGrid.from_range(560.0, 880.0, 0.2)


@pytest.fixture(scope="session")
def scan_grid():
    return SpectralGrid.from_range(700.0, 720.0, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
