import numpy as np
import pytest
import torch
from hypothesis import settings

from tarot.core import DTYPE, make_mlp_scorer

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


class Logistic1D(torch.nn.Module):
    """Two logits (0, w*x + b): class 1 is the positive class."""

    def __init__(self, w=1.0, b=0.0):
        super().__init__()
        self.w, self.b = w, b

    def forward(self, x):
        z = self.w * x[:, :1] + self.b
        return torch.cat([torch.zeros_like(z), z], dim=1)


def linear_scorer(W, b=None):
    W = torch.as_tensor(np.asarray(W, dtype=np.float64))
    lin = torch.nn.Linear(W.shape[1], W.shape[0], dtype=DTYPE)
    with torch.no_grad():
        lin.weight.copy_(W)
        lin.bias.copy_(torch.zeros(W.shape[0], dtype=DTYPE) if b is None else torch.as_tensor(b))
    return lin


@pytest.fixture
def small_mlp():
    return make_mlp_scorer(2, 3, hidden=8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
