import numpy as np
import pytest

from fr_minmax.measure import Grid, gibbs_normalize, reference_from_potential
from fr_minmax.payoff import _random_gibbs
from fr_minmax.rng import named_rng


@pytest.fixture
def rng():
    return named_rng(1234, "tests")


@pytest.fixture
def two_points():
    return Grid.finite(2)


@pytest.fixture
def line64():
    return Grid.uniform(0.0, 1.0, 64)


def uniform_ref(grid):
    return reference_from_potential(grid, np.zeros(grid.size))


def measure_from(grid, probs):
    # masses -> measure on a grid with arbitrary weights
    p = np.asarray(probs, dtype=float)
    return gibbs_normalize(np.log(p) - grid.log_weights, grid)[0]


def random_measure(grid, rng):
    return _random_gibbs(grid, rng)
