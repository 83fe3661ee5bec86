import os
import sys

import numpy as np
import pytest

# Add parent directory to path to import app modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from components.hsae_model import HsaeConfig, init_model  # noqa: E402


@pytest.fixture
def small_config():
    return HsaeConfig(d=8, m_top=6, k=2, a=4, s=2)


@pytest.fixture
def small_model(small_config):
    return init_model(small_config, np.random.default_rng(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)
