import numpy as np
import pytest

from pina.config import ExperimentConfig, with_overrides
from pina.model import ClientDataset, FrozenBackbone, init_params
from pina.numeric import RngStream


@pytest.fixture
def backbone():
    return FrozenBackbone.sample(d=6, h=8, stream=RngStream(1, "backbone"))


@pytest.fixture
def params(backbone):
    return init_params(backbone, n_classes=3, rank=2, stream=RngStream(1, "init"))


@pytest.fixture
def dataset():
    rng = np.random.default_rng(5)
    y = rng.integers(3, size=40)
    X = rng.standard_normal((40, 6)) + 2.0 * np.eye(3, 6)[y]
    return ClientDataset(X, y, 3)


def tiny_config(**changes) -> ExperimentConfig:
    """A fast population for end-to-end tests: 40 clients, short runs."""
    base = ExperimentConfig(C=2, T_in=3, T_tr=4)
    base = with_overrides(base, **{"population.clients_per_cluster": 20, "population.samples_per_client": 50,
                                   "population.test_samples": 20, "privacy.q": 0.25})
    return with_overrides(base, **changes)
