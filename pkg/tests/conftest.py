import numpy as np
import pytest
from support import double_well, double_well_grid

from nemrelax.convexify import rank_one_convexify
from nemrelax.energy_models import make_one_constant


@pytest.fixture(scope="session")
def dw():
    return double_well()


@pytest.fixture(scope="session")
def dw_grid():
    return double_well_grid()


@pytest.fixture(scope="session")
def dw_envelope(dw, dw_grid):
    return rank_one_convexify(dw, None, dw_grid)


@pytest.fixture(scope="session")
def one_constant():
    return make_one_constant(1.0, dim=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
