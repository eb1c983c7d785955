import numpy as np
import pytest

from glmar_bayes.lattice import block_mask, build_kernel
from glmar_bayes.model import HyperPriors, ModelContext
from glmar_bayes.selfcheck import random_problem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def line_kernel():
    return build_kernel(block_mask(1, 3))


@pytest.fixture
def small_problem(rng):
    """(data, kernel, state) on a 3x3 mask, T=40, K=2, P=1."""
    return random_problem(rng)


@pytest.fixture
def small_context(small_problem):
    data, kernel, _ = small_problem
    return ModelContext.from_data(data, kernel, HyperPriors())
