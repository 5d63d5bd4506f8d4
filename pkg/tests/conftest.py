import numpy as np
import pytest
import torch

from pyragen.data import TextureCorpus
from pyragen.trainer import TrainConfig


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_config():
    return TrainConfig(
        levels=2, top_resolution=32, base_width=8, batch_size=1, steps=4, seed=11
    )


@pytest.fixture(scope="session")
def texture_images_32():
    return TextureCorpus(6, seed=3).at_resolution(32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
