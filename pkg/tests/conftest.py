import numpy as np
import pytest

from segshield.core import RngSeed, Sample


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=16, channels=1):
    return rng.random((size, size, channels)).astype(np.float32)


def random_mask(rng, size=16):
    """Random blob-ish mask, guaranteed nonempty and non-full."""
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
    radius = rng.uniform(0.15 * size, 0.3 * size)
    return (np.hypot(r - cy, c - cx) <= radius).astype(np.uint8)


def make_sample(rng, size=16, channels=1, sid="s0"):
    return Sample(random_image(rng, size, channels), random_mask(rng, size), sid)


@pytest.fixture
def seed():
    return RngSeed(7)
