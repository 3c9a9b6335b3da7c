import numpy as np
import pytest
import torch

from pmgaft.model import (HashTextEncoder, LinearImageEncoder, MLPImageEncoder, TwoTowerModel,
                          build_toy_model)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_model(kind="mlp", shape=(1, 4, 4), dim=6, hidden=5, seed=0, dtype=torch.float64,
               logit_scale=1.0, normalize=False):
    m = build_toy_model(kind=kind, input_shape=shape, dim=dim, hidden=hidden, width=8, patch=2,
                        init_seed=seed, logit_scale=logit_scale, normalize_embeddings=normalize)
    return m.to(dtype)


@pytest.fixture
def small_model():
    return tiny_model()


def random_images(n, shape=(1, 4, 4), seed=0, dtype=torch.float64, lo=0.1, hi=0.9):
    gen = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand((n, *shape), generator=gen, dtype=dtype)


def random_probs(n, c, gen, dtype=torch.float64, scale=3.0):
    return torch.softmax(scale * torch.randn(n, c, generator=gen, dtype=dtype), dim=1)
