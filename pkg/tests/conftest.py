"""Shared fixtures: seeded generators, a narrow model and small phantoms"""

import numpy as np
import pytest

from modules.data_io import SynthPairSpec, make_lr, synth_pair
from modules.fusion import FASRModel, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return ModelConfig(channels=(4, 8, 8), embed_dim=8, decoder_channels=8)


@pytest.fixture
def small_model(small_config):
    return FASRModel.init(small_config, seed=0)


@pytest.fixture
def small_pair():
    pair = synth_pair(SynthPairSpec(seed=3, size=16))
    return pair, make_lr(pair.t2, 4)


def random_image(rng, c=1, h=16, w=16, scale=0.5):
    return np.clip(rng.standard_normal((c, h, w)) * scale, -1.0, 1.0)
