import functools

import pytest
from hypothesis import HealthCheck, settings

from nncompress import nn_engine

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TREND_SEEDS = (0, 1, 2, 3, 4)


@functools.lru_cache(maxsize=None)
def trained_toy(seed: int):
    """(dataset, model) at the default hyperparameters, cached across test files."""
    data = nn_engine.make_toy_dataset(seed)
    return data, nn_engine.train_toy(data, seed=seed)


@pytest.fixture(scope="session")
def toy0():
    return trained_toy(0)
