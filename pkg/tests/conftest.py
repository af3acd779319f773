import numpy as np
import pytest

from capsattack import CapsNet, CNNBaseline, synthetic_dataset
from capsattack.config import BaselineConfig, CapsNetConfig, ReconNetConfig
from capsattack.enums import ModelKind
from capsattack.tensor import Tensor

# 4 channels of 6x6 after a 3x3 convolution on 8x8 inputs: N = 36 primary capsules of d_in = 4
TINY_BACKBONE = [{"channels": 4, "kernel": 3, "stride": 1, "activation": "relu"}]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return CapsNetConfig(
        input_shape=(1, 8, 8),
        backbone=TINY_BACKBONE,
        primary_dim=4,
        num_classes=3,
        out_dim=4,
        routing_iters=3,
    )


@pytest.fixture
def recon_config():
    return ReconNetConfig([16])


@pytest.fixture
def capsnet(tiny_config, recon_config):
    return CapsNet(tiny_config, recon_config, seed=0)


@pytest.fixture
def baseline_config():
    return BaselineConfig(input_shape=(1, 8, 8), backbone=TINY_BACKBONE, num_classes=3, group_dim=4)


@pytest.fixture(params=[ModelKind.cnn_cr, ModelKind.cnn_r])
def baseline(request, baseline_config, recon_config):
    return CNNBaseline(baseline_config, request.param, recon_config, seed=0)


@pytest.fixture
def tiny_data():
    return synthetic_dataset(classes=3, per_class=4, size=8, seed=0, split="test")


def double(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), precision="double")
