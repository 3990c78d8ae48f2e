import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crnet.cli import default_corpus
from crnet.model import ModelConfig

settings.register_profile(
    "crnet", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("crnet")


@pytest.fixture(scope="session")
def corpus_bytes() -> bytes:
    return default_corpus()


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(n_layers=3, hidden=8, ffn_hidden=16, heads=1, ranks=(2, 2), vocab=16, seq_len=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
