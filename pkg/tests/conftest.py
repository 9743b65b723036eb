import numpy as np
import pytest

from mlvicx.model import EncoderConfig, MLVICXModel
from mlvicx.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return EncoderConfig(channels=(2, 3), blocks=(1, 1), strides=(1, 2), tap_levels=(0, 1),
                         input_channels=1, image_size=8, head_width=4)


@pytest.fixture
def tiny_model(tiny_config):
    return MLVICXModel(tiny_config, seed=3)


def tensor_from(rng, *shape, lo=-1.0, hi=1.0, requires_grad=False):
    data = rng.uniform(lo, hi, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=requires_grad)
