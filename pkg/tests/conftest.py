import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from gaitreid.embedder import ModelConfig, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        conv_channels=(2, 3, 4),
        pyramid_scales=(1, 2),
        strip_dim=3,
        branches=2,
        seed=3,
        dtype="float64",
    )


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config)


def random_frames(rng, count, fill=0.45):
    return rng.random((count, 64, 44)) > (1.0 - fill)
