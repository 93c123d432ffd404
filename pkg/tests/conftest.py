import numpy as np
import pytest

from etcram import device


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def update_map():
    return device.programming_update_map()


@pytest.fixture(scope="session")
def etcram_params():
    return device.device_preset("etcram")
