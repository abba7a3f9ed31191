import numpy as np
import pytest
import torch

from scripts.numeric import set_precision


@pytest.fixture(autouse=True)
def _reset_precision():
    set_precision("f32")
    yield
    set_precision("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tgen():
    return torch.Generator().manual_seed(1234)


def random_map(gen: torch.Generator, C: int, h: int, w: int) -> torch.Tensor:
    return torch.randn(C, h, w, generator=gen, dtype=torch.float64)


def random_mask(rng: np.random.Generator, h: int, w: int, labels=(0, 1), p=None) -> torch.Tensor:
    return torch.from_numpy(rng.choice(np.asarray(labels, dtype=np.uint8), size=(h, w), p=p))
