import numpy as np
import pytest
import torch

from sfuda.data import SyntheticConfig, make_synthetic_shift_suite
from sfuda.network import TrainConfig, build_small_cnn
from sfuda.oracle import Oracle, train_source_ensemble

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_suite_config(**kw):
    base = dict(num_classes=4, image_size=8, n_per_domain=120, n_third_party=80)
    base.update(kw)
    return SyntheticConfig(**base)


@pytest.fixture(scope="session")
def small_world():
    """Tiny 4-class suite with a two-source oracle; shared read-only across tests."""
    sources, target, third = make_synthetic_shift_suite(7, small_suite_config())
    ens = train_source_ensemble(sources, TrainConfig(learning_rate=0.05, epochs=5), forbidden=[target],
                                seed=7, feature_dim=32)
    return {"sources": sources, "target": target, "third": third, "ensemble": ens}


@pytest.fixture
def oracle(small_world):
    # fresh log per test, same frozen ensemble
    return Oracle(small_world["ensemble"])


@pytest.fixture
def tiny_model():
    return build_small_cnn((8, 8, 3), 4, seed=0, feature_dim=16, channels=(4, 8))
