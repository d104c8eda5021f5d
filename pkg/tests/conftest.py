import numpy as np
import pytest

from mcslam.camera import camera_c1
from mcslam.rig import rig_r1


@pytest.fixture(scope="session")
def c1():
    return camera_c1()


@pytest.fixture(scope="session")
def r1():
    return rig_r1()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
