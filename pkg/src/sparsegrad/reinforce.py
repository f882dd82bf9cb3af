"""Score-function baseline: one sampled integer tuple per distribution.

The weight tensor is parametrized exactly like a sparse layer, but each
step draws a single continuous point per tuple, rounds it, and builds a
hard sparse matrix from the result. Values receive ordinary gradients
through that matrix; the tuple means and spreads receive the score-function
estimate (loss - baseline) * grad log N(z | mean, variance).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .sparse import SparseLayer, sparse_matmul

LOG_2PI = float(np.log(2.0 * np.pi))


class MovingBaseline:
    """Exponential moving average of the loss, seeded with the first value."""

    def __init__(self, momentum: float = 0.9, enabled: bool = True):
        self.momentum = momentum
        self.enabled = enabled
        self._value = None

    def value(self, fallback: float) -> float:
        if not self.enabled:
            return 0.0
        return fallback if self._value is None else self._value

    def update(self, loss: float):
        if self._value is None:
            self._value = loss
        else:
            self._value = self.momentum * self._value + (1 - self.momentum) * loss


class ReinforceLayer(SparseLayer):
    """Sparse-layer parameters trained with the score-function estimator."""

    def sample_points(self, rng) -> np.ndarray:
        """One continuous point per tuple from N(mean_i, diag(variance_i))."""
        return rng.normal(self.means().data, np.sqrt(self.variances().data))

    def rounded_sample(self, points: np.ndarray) -> np.ndarray:
        dims = np.asarray(self.shape.dims, dtype=np.int64)
        return np.clip(np.rint(points).astype(np.int64), 0, dims - 1)


def gaussian_log_density(means: Tensor, variances: Tensor, points: np.ndarray) -> Tensor:
    """Sum of log N(points | means, diag(variances)) over all tuples."""
    diff = ad.sub(np.asarray(points, dtype=np.float64), means)
    quad = ad.div(ad.mul(diff, diff), variances)
    return ad.mul(ad.tsum(ad.add(ad.add(ad.log(variances), quad), LOG_2PI)), -0.5)


def reinforce_step(layer: ReinforceLayer, x, target, optimizer, rng,
                   baseline: MovingBaseline) -> float:
    """One sampled hard matrix, mse forward, score-function backward, Adam."""
    optimizer.zero_grad()
    with Tape() as tape:
        means = layer.means()
        variances = layer.variances()
        points = rng.normal(means.data, np.sqrt(variances.data))
        tuples = layer.rounded_sample(points)
        y = sparse_matmul(layer.values, tuples, layer.shape, ad.as_tensor(x))
        loss = ad.mse_loss(y, ad.as_tensor(target))
        loss_value = loss.item()
        advantage = loss_value - baseline.value(loss_value)
        surrogate = ad.add(loss, ad.mul(gaussian_log_density(means, variances, points),
                                        advantage))
        tape.backward(surrogate)
    baseline.update(loss_value)
    optimizer.step()
    return loss_value


LEARNING_RATE_GRID = (0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00005, 0.00001)
