"""
Shared fixtures: float64 tensors, seeded weights and small run configs
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from src.autograd import nn
from src.autograd.tensor import set_default_dtype
from src.core.config import make_preset
from src.world.dataset import make_samples


@pytest.fixture(autouse=True)
def float64_tensors():
    set_default_dtype("float64")
    nn.manual_seed(0)
    yield
    set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def micro_config(tmp_path):
    config = make_preset("micro")
    config.output_dir = str(tmp_path / "run")
    return config


@pytest.fixture
def toy_config(tmp_path):
    config = make_preset("toy")
    config.output_dir = str(tmp_path / "run")
    return config


@pytest.fixture(scope="session")
def micro_samples():
    return make_samples(make_preset("micro").scene, 2, base_seed=3)


@pytest.fixture
def micro_sample(micro_samples):
    return micro_samples[0]
