"""Shared fixtures."""

import numpy as np
import pytest

from tri_branch_fusion.synth import SyntheticGenerator
from tri_branch_fusion.tensor import precision

from .factories import small_synth_config, tiny_model_config


@pytest.fixture(scope="module")
def float64():
    """Run a whole module in 64-bit for oracle and finite-difference checks.

    Module scope makes the switch happen before any setup_method.
    """
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture(scope="session")
def small_splits():
    return SyntheticGenerator(small_synth_config()).generate()
