import numpy as np
import pytest

from stadb.ablation import synthetic_splits
from stadb.gradcheck import tiny_config


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (minutes)")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_config():
    """16×8 images, two conv stages; trains in well under a second per epoch."""
    return tiny_config(epochs=2, iters_per_epoch=2, checkpoint_interval=1)


@pytest.fixture(scope="session")
def small_splits():
    return synthetic_splits(n_ids=6, per_id=4, n_cams=2, seed=0, height=16, width=8)
