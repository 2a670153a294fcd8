import numpy as np
import pytest

from boundary_lq.fixtures import random_bounded_model, scalar_model
from boundary_lq.thermoplate import ThermoPlateParams, assemble_thermo_model


@pytest.fixture(scope="session")
def scalar():
    return scalar_model()


@pytest.fixture(scope="session")
def random5():
    return random_bounded_model(0)


@pytest.fixture(scope="session")
def thermo8():
    """Smallest admissible 1-D thermoelastic model (dim_y = 24)."""
    return assemble_thermo_model(ThermoPlateParams(mesh_size=8))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
