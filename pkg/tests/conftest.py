import os
import pytest
import torch
from fitmask.config import TrainConfig
from fitmask.synthetic import SyntheticSpec, generate_synthetic

os.environ.setdefault("FITMASK_NO_DOTENV", "1")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long synthetic reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY = {
    'batch_size': 4,
    'epochs': 2,
    'K': 4,
    'queue_size': 16,
    'm': 0.99,
    'encoder.channels': 8,
    'encoder.stem_widths': [4, 8, 8],
    'encoder.projector_dims': [16],
}


@pytest.fixture
def make_config():
    """
    Factory for tiny desk-scale configs: 64px input, 4x4x8 feature maps, K=4, D=16.
    """
    def make(**overrides):
        return TrainConfig.desk_scale().override({**TINY, **overrides})
    return make


@pytest.fixture
def float64(monkeypatch):
    monkeypatch.setenv("FITMASK_DTYPE", "float64")
    yield torch.float64


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    spec = SyntheticSpec(classes=3, train_per_class=8, test_per_class=6, seed=3)
    return generate_synthetic(spec, tmp_path_factory.mktemp("tiny_data"))
