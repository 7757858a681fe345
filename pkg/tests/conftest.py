import numpy as np
import pytest
import torch

from crossdis import datagen
from crossdis.model import ArchConfig, CrossDomainModel

# 16x16 images, 2x2 shared grid: small enough for finite differences and CPU steps
TINY = ArchConfig(resolution=16, encoder_widths=(8, 16), shared_channels=16,
                  decoder_widths=(16, 8), critic_widths=(8, 16, 32), noise_critic_widths=(16, 16),
                  dropout_layers=1)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    m = CrossDomainModel(TINY)
    m.eval()
    return m


def fake_digits(n, size=28, seed=0):
    """Blocky synthetic digits: a random rectangle of full intensity on black."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = np.zeros((size, size), np.float32)
        r0, c0 = rng.integers(1, size // 2, 2)
        r1, c1 = r0 + rng.integers(2, size // 2), c0 + rng.integers(2, size // 2)
        img[r0:r1, c0:c1] = 1.0
        out.append(datagen.GrayscaleDigit(img, i % 10))
    return out


@pytest.fixture(scope="session")
def mnist_test_small():
    return datagen.mnist_cdcb("test", seed=0, count=40, resolution=16)
