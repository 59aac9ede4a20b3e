import numpy as np
import pytest

from mrag.embed import EmbedderConfig, HashingEmbedder
from mrag.generator import Generator, MockBackend


@pytest.fixture
def embedder():
    return HashingEmbedder(EmbedderConfig(dimension=64, seed=7))


@pytest.fixture
def mock_generator():
    return Generator(MockBackend())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_unit_vectors(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
