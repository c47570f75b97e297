import numpy as np
import pytest
import torch

from streamadapt.data import GeneratorConfig, generate_synthetic_volume
from streamadapt.model import ArchConfig, PretrainConfig, build_model, pretrain_source

TINY_GEN = GeneratorConfig(image_size=32, n_slices=8)
TINY_ARCH = ArchConfig(class_count=5, stages=2, base_width=4)


@pytest.fixture(scope="session")
def tiny_volumes():
    return [generate_synthetic_volume(TINY_GEN, 100 + i) for i in range(4)]


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_volumes):
    """A small model trained enough for BN statistics to be meaningful."""
    torch.set_num_threads(4)
    model = build_model(TINY_ARCH, seed=0)
    pretrain_source(model, tiny_volumes,
                    PretrainConfig(epochs=30, lr=2e-3, batch_size=8, seed=0,
                                   val_volumes=1, dsc_threshold=0.5))
    return model


@pytest.fixture()
def tiny_model():
    return build_model(TINY_ARCH, seed=0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
