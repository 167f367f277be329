import pytest
import torch

from apga.build_apga import build_apga
from apga.data import ImageBatch, SyntheticSpec, generate
from apga.trainer import TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(
        image_size=16,
        roi_size_min=3,
        roi_size_max=4,
        distractor_size_min=2,
        distractor_size_max=3,
        n_train=8,
        n_val=4,
        n_test=2,
        seed=3,
    )


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate(tiny_spec)


@pytest.fixture
def tiny_config():
    return TrainConfig(
        steps=3,
        batch_size=4,
        pretrain_epochs=1,
        eval_interval=2,
        progress=False,
        seed=7,
    )


@pytest.fixture
def models():
    return build_apga(seed=11)


@pytest.fixture
def batch():
    g = torch.Generator().manual_seed(0)
    return ImageBatch(torch.rand(4, 1, 16, 16, generator=g), torch.tensor([0, 1, 1, 0]))
