import numpy as np
import pytest

from motionpet.volume import Volume3D, centered_origin


def make_volume(data, voxel=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.float64)
    return Volume3D(data, voxel, centered_origin(data.shape, voxel))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
