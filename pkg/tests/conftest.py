"""Shared feeders and cases."""

import numpy as np
import pytest

from tests.helpers import load_device, make_case, make_feeder
from voltreg.config import SolverConfig
from voltreg.feeder import load_feeder
from voltreg.synthetic import generate_feeder


@pytest.fixture
def line3():
    return load_feeder("builtin:line3")


@pytest.fixture
def tri2():
    return load_feeder("builtin:tri2")


@pytest.fixture
def star8():
    """Eight single-phase branches straight off the slack."""
    feeder = make_feeder([0] * 8, z=[0.01 * (k + 1) + 0.02j for k in range(8)])
    return make_case(feeder, [load_device(k, -0.05) for k in range(1, 9)], alpha=0.1)


@pytest.fixture
def binary63():
    return generate_feeder(63, branching=2, topology="dary", seed=3)


@pytest.fixture
def random3phase():
    return generate_feeder(60, phases=3, topology="random", seed=7)


@pytest.fixture
def random3phase200():
    return generate_feeder(200, phases=3, topology="random", seed=7)


@pytest.fixture
def tri2_extended():
    """Twenty three-phase nodes with mutual impedance on every line."""
    return generate_feeder(20, phases=3, topology="random", seed=5)


@pytest.fixture
def chain4():
    return make_case(make_feeder([0, 1, 2, 3]))


@pytest.fixture
def undervoltage_line3():
    """LINE3 topology carrying loads heavy enough to pull both nodes below 0.95 p.u."""
    feeder = make_feeder([0, 1], z=[0.1 + 0.1j, 0.2 + 0.2j])
    return make_case(feeder, [load_device(1, -0.1), load_device(2, -0.2)])


@pytest.fixture
def regularized_config():
    """A strongly regularized setting whose stepsize is inside the contraction range of the fixtures."""
    return SolverConfig(eps=0.05, eta=0.5, max_iters=20000, sigma=1e-10, sigma_z=1e-10)


@pytest.fixture
def rng():
    return np.random.default_rng(11)
