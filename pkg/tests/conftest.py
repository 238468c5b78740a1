import numpy as np
import pytest
import torch

from poisonforge.data import ImageBatch, make_toy_dataset
from poisonforge.model import build_bundle


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_small():
    return make_toy_dataset(4, 8, 8, 0)


@pytest.fixture(scope="session")
def toy_medium():
    return make_toy_dataset(4, 20, 16, 3)


@pytest.fixture
def tiny_bundle():
    return build_bundle("TinyConvNet", (3, 8, 8), D=16, P=8, K=4, projector_layers=2, seed=0, width=8)


def random_batch(rng, n=6, shape=(3, 8, 8), k=3, name="r"):
    return ImageBatch(rng.random((n,) + shape, dtype=np.float32), rng.integers(0, k, n), [f"{name}-{i}" for i in range(n)], k)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
