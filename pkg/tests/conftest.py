import numpy as np
import pytest

from hdrfuse.synthetic import make_dataset, make_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene():
    return make_scene(32, 32, seed=7)


@pytest.fixture
def tiny_dataset(tmp_path):
    """Two 64x64 training scenes and one test scene on disk."""
    return make_dataset(tmp_path / "data", n_train=2, n_test=1, height=64, width=64, seed=3)
