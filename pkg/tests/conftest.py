import numpy as np
import pytest
from hypothesis import settings

from hvitkit.hvit import LOCAL, TEST, build_model

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(TEST, scheme=LOCAL, seed=7, init_std=0.2)


@pytest.fixture
def random_regions(rng):
    return rng.integers(0, 256, size=(3, 64, 64, 3), dtype=np.uint8)
