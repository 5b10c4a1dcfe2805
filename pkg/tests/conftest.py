import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "app"))
sys.path.insert(0, ROOT)

from market import EconParams, MarketState, SamplerConfig  # noqa: E402


@pytest.fixture
def econ():
    return EconParams()


@pytest.fixture
def sampler():
    return SamplerConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def two_type_state():
    return MarketState(n=50, Q=2, L_max=4.0, p=np.array([0.5, 0.5]), theta=np.array([20.0, 80.0]))
