"""Learned sparse tensor transformations and differentiable sorting."""

from .autodiff import Adam, Linear, MLP, Tape, Tensor, bce_loss, mse_loss
from .rng import SeedStream
from .sparse import (
    HyperlayerShape,
    SamplingConfig,
    SparseLayer,
    accumulate_gradients,
    sparse_matmul,
)

__all__ = [
    "Adam",
    "Linear",
    "MLP",
    "Tape",
    "Tensor",
    "bce_loss",
    "mse_loss",
    "SeedStream",
    "HyperlayerShape",
    "SamplingConfig",
    "SparseLayer",
    "accumulate_gradients",
    "sparse_matmul",
]
