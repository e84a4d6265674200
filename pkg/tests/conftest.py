import numpy as np
import pytest

from brcl.gaussfield import ModelParams


@pytest.fixture
def params():
    return ModelParams(sigma=1.0, alpha=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running Monte Carlo test")
