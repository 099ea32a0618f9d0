"""
Shared fixtures for usp-ebm tests
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from usp_ebm.core.distributions import BoxDomain, six_mode_ring_2d, two_gaussians_1d


def pytest_collection_modifyitems(config, items):
    if os.getenv("USP_EBM_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(
        reason="set USP_EBM_RUN_SLOW=1 to run training reproductions"
    )
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_gaussians():
    return two_gaussians_1d()


@pytest.fixture
def six_modes():
    return six_mode_ring_2d()


@pytest.fixture
def unit_interval():
    return BoxDomain(np.array([-1.0]), np.array([1.0]))


@pytest.fixture
def square():
    return BoxDomain(np.array([-1.5, -1.5]), np.array([1.5, 1.5]))
