import numpy as np
import pytest

from utsrmorph import tensor as T


@pytest.fixture(autouse=True)
def _default_precision():
    T.set_precision(32)
    yield
    T.set_precision(32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_volume(rng, shape, sigma=2.0):
    from scipy import ndimage
    v = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return ((v - v.min()) / np.ptp(v)).astype(np.float32)


@pytest.fixture(name="smooth_volume")
def smooth_volume_fixture():
    r = np.random.default_rng(99)
    return lambda shape, sigma=2.0: smooth_volume(r, shape, sigma)
