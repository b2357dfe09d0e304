import os

import numpy as np
import pytest

os.environ.setdefault("LOG_LEVEL", "WARNING")
os.environ.setdefault("RECENCY_LAB_THREADS", "1")

from recency_lab.adapters import activation_store  # noqa: E402
from recency_lab.models.activations import ActivationTensor  # noqa: E402
from recency_lab.models.config import DataConfig, ModelConfig, ProbeConfig, TrainConfig  # noqa: E402
from recency_lab.models.records import ProbeSplit, SampleIndex  # noqa: E402
from recency_lab.services.vocabulary import default_vocabulary  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _fresh_acts_cache():
    activation_store.clear_cache()
    yield
    activation_store.clear_cache()


@pytest.fixture
def vocab():
    return default_vocabulary()


@pytest.fixture
def micro_model_config():
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_context=24)


@pytest.fixture
def micro_train_config():
    return TrainConfig(learning_rate=3e-3, batch_size=16, epochs=1, seed=0)


@pytest.fixture
def small_data_config():
    return DataConfig(n_entities=60, m=3, seed=7)


@pytest.fixture
def fast_probe_config():
    return ProbeConfig(n_splits=2, max_iter=200)


def make_acts(data: np.ndarray, stages, entity_ids=None, probe_test=None, prompt_id: int = 1) -> ActivationTensor:
    """ActivationTensor over hand-built data with one row per entity unless told otherwise."""
    n = data.shape[0]
    entity_ids = list(range(n)) if entity_ids is None else list(entity_ids)
    probe_test = [False] * n if probe_test is None else list(probe_test)
    index = [
        SampleIndex(
            entity_id=int(e),
            stage=int(s),
            probe_split=ProbeSplit.probe_test if t else ProbeSplit.probe_train,
            prompt_id=prompt_id,
        )
        for e, s, t in zip(entity_ids, stages, probe_test)
    ]
    return ActivationTensor(data=np.asarray(data, dtype=np.float32), index=index, fingerprint="test")


@pytest.fixture
def separable_acts():
    """Two stages, 100 rows each, separated along dim 0 at cell (1, 2) only."""
    rng = np.random.default_rng(0)
    n, L, T, D = 200, 2, 3, 8
    data = rng.normal(size=(n, L, T, D))
    stages = np.repeat([1, 2], n // 2)
    data[:, 1, 2, 0] += np.where(stages == 2, 3.0, -3.0)
    return make_acts(data, stages)
