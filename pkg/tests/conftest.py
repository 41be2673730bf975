import numpy as np
import pytest
import torch

from scnet.config import ModelConfig
from scnet.model import SCNet, init_weights
from scnet.synth import generate_corpus

# the CI box is single-core; more threads just add scheduling noise
torch.set_num_threads(1)


def tiny4_config(**overrides) -> ModelConfig:
    """Smallest 4-scale config that still exercises every code path."""
    kw = dict(
        num_scales=4,
        encoder_channels=[4, 8, 8, 8],
        convs_per_block=[2, 2, 2, 2],
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny5_config(**overrides) -> ModelConfig:
    kw = dict(
        num_scales=5,
        encoder_channels=[2, 4, 4, 8, 8],
        convs_per_block=[2, 2, 3, 3, 3],
    )
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def tiny4_cfg():
    return tiny4_config()


@pytest.fixture
def tiny5_cfg():
    return tiny5_config()


@pytest.fixture
def tiny4_model(tiny4_cfg):
    model = SCNet(tiny4_cfg)
    init_weights(model, seed=0)
    model.eval()
    return model


def zero_parameters(model: torch.nn.Module) -> None:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


@pytest.fixture(scope="session")
def corpus64(tmp_path_factory):
    """Four 64px pavement-style samples shared by data/training tests."""
    root = tmp_path_factory.mktemp("corpus64")
    generate_corpus(str(root), count=4, size=64, style="pavement-like", fg_percent=6.0, seed=11)
    return str(root)


def rand_probs_gt(rng: np.random.Generator, shape=(16, 16), quantized=False):
    probs = rng.random(shape)
    if quantized:
        # land exactly on grid values to exercise the >= tie at thresholds
        probs = rng.integers(0, 101, shape) / 100.0
    gt = (rng.random(shape) < 0.3).astype(np.uint8)
    return probs, gt
