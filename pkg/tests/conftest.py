import numpy as np
import pytest

from skippylab import instances


@pytest.fixture
def two_path():
    return instances.two_path()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
