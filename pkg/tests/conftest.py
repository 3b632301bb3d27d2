import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def make_rng():
    """Factory for independently seeded generators inside loop-style tests."""

    def make(seed: int) -> np.random.Generator:
        return np.random.default_rng(seed)

    return make


def full_mask(shape) -> np.ndarray:
    return np.ones(shape, dtype=bool)
