"""Sparse weight tensors parametrized by continuous index tuples.

A layer holds k continuous index tuples (rows of ``d_raw`` mapped through a
sigmoid into the index hyperrectangle), per-tuple spread parameters, and
per-tuple values. Each forward pass samples integer index tuples around the
continuous ones (lattice corners, a local box, and global draws), assigns
each integer tuple a share of every value proportional to its Gaussian
density under that value's tuple, and contracts the resulting sparse tensor
with the input. Gradients flow through the proportions and values only; the
integer tuples are constants of the pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .cantor import first_occurrence_mask

LOG_2PI = float(np.log(2.0 * np.pi))


class DegenerateSampleError(RuntimeError):
    """A continuous tuple assigned no mass to any unmasked integer tuple."""


@dataclass(frozen=True)
class HyperlayerShape:
    """Shapes of the transformation input, output, and weight tensor."""

    input_dims: tuple
    output_dims: tuple

    def __post_init__(self):
        dims = self.output_dims + self.input_dims
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"invalid hyperlayer dims {dims}")

    @property
    def dims(self):
        """Weight tensor dims: output dims followed by input dims."""
        return tuple(self.output_dims) + tuple(self.input_dims)

    @property
    def rank(self):
        return len(self.dims)

    @property
    def in_size(self):
        return int(np.prod(self.input_dims))

    @property
    def out_size(self):
        return int(np.prod(self.output_dims))


@dataclass
class SamplingConfig:
    """How many integer tuples to draw around each continuous tuple."""

    a_local: int
    a_global: int
    region: tuple

    def validate(self, dims):
        if self.a_local < 0 or self.a_global < 0:
            raise ValueError("sample counts must be nonnegative")
        if len(self.region) != len(dims):
            raise ValueError(f"region rank {len(self.region)} != tensor rank {len(dims)}")
        for l, d in zip(self.region, dims):
            if not 1 <= l <= d:
                raise ValueError(f"region extent {l} outside [1, {d}]")

    @property
    def samples_per_tuple(self):
        return self.a_local + self.a_global


# ---------------------------------------------------------------------------
# parameter mapping

def tuple_means(d_raw, dims) -> Tensor:
    """Map raw rows into the index hyperrectangle: sigmoid(x) * dims."""
    return ad.mul(ad.sigmoid(d_raw), np.asarray(dims, dtype=np.float64))


def tuple_variances(sigma_raw, dims, tau: float) -> Tensor:
    """Per-dimension variances: softplus(s + 2) * dims * 0.1 + tau.

    The floor tau keeps every variance strictly positive so densities and
    their gradients stay finite even when the spread collapses.
    """
    sp = ad.softplus(ad.add(sigma_raw, 2.0))
    scaled = ad.mul(ad.reshape(sp, (-1, 1)), np.asarray(dims, dtype=np.float64) * 0.1)
    return ad.add(scaled, tau)


# ---------------------------------------------------------------------------
# integer tuple sampling (plain numpy; indices are constants of a pass)

def nearest_corners(d: np.ndarray, dims) -> np.ndarray:
    """All floor/ceil combinations per dimension, clamped into bounds.

    Returns shape (k, 2**r, r). Clamping at the boundary can create
    repeated corners; they are left in and removed by the duplicate mask.
    """
    d = np.asarray(d, dtype=np.float64)
    k, r = d.shape
    lo = np.floor(d).astype(np.int64)
    bits = ((np.arange(2 ** r)[:, None] >> np.arange(r - 1, -1, -1)) & 1).astype(np.int64)
    corners = lo[:, None, :] + bits[None, :, :]
    return np.clip(corners, 0, np.asarray(dims, dtype=np.int64) - 1)


def sample_local(d: np.ndarray, region, dims, a_local: int, rng) -> np.ndarray:
    """Uniform draws from an integer box of the region size around round(d).

    The box is translated (never truncated) to lie fully inside the bounds.
    Returns shape (k, a_local, r).
    """
    d = np.asarray(d, dtype=np.float64)
    k, r = d.shape
    if a_local == 0:
        return np.zeros((k, 0, r), dtype=np.int64)
    region = np.asarray(region, dtype=np.int64)
    dims = np.asarray(dims, dtype=np.int64)
    center = np.rint(d).astype(np.int64)
    lo = center - (region - 1) // 2
    lo = np.clip(lo, 0, dims - region)
    return lo[:, None, :] + rng.integers(0, region, size=(k, a_local, r))


def sample_global(dims, k: int, a_global: int, rng) -> np.ndarray:
    """Uniform draws over the full integer index space; shape (k, a_global, r)."""
    dims = np.asarray(dims, dtype=np.int64)
    return rng.integers(0, dims, size=(k, a_global, len(dims)))


def sample_integer_tuples(d: np.ndarray, cfg: SamplingConfig, dims, rng) -> np.ndarray:
    """Corner + local + global tuples per continuous tuple, tuple-major.

    Returns shape (k * (2**r + a_local + a_global), r).
    """
    corners = nearest_corners(d, dims)
    local = sample_local(d, cfg.region, dims, cfg.a_local, rng)
    glob = sample_global(dims, d.shape[0], cfg.a_global, rng)
    per_tuple = np.concatenate([corners, local, glob], axis=1)
    return per_tuple.reshape(-1, d.shape[1])


def duplicate_mask(tuples: np.ndarray) -> np.ndarray:
    """0/1 mask zeroing every repeated integer tuple except its first row."""
    return first_occurrence_mask(tuples)


# ---------------------------------------------------------------------------
# proportions and value distribution (on the graph)

def gaussian_proportions(means: Tensor, variances: Tensor, tuples: np.ndarray) -> Tensor:
    """Density matrix P[i, j] = N(tuple_j | mean_i, diag(variance_i)).

    Includes the full normalization constant: it cancels in the row
    normalization but contributes to the variance gradients.
    """
    k, r = means.shape
    pts = np.asarray(tuples, dtype=np.float64)[None, :, :]   # (1, N, r)
    m3 = ad.reshape(means, (k, 1, r))
    inv_two_var = ad.reshape(ad.div(0.5, variances), (k, 1, r))
    diff = ad.sub(pts, m3)
    quad = ad.tsum(ad.mul(ad.mul(diff, diff), inv_two_var), axis=2)          # (k, N)
    log_norm = ad.mul(ad.tsum(ad.log(variances), axis=1, keepdims=True), 0.5)
    log_p = ad.neg(ad.add(ad.add(quad, log_norm), 0.5 * r * LOG_2PI))
    return ad.exp(log_p)


def distribute_values(proportions: Tensor, mask: np.ndarray, values: Tensor) -> Tensor:
    """Mask, row-normalize, and mix values: v'[j] = sum_i P'[i, j] * v[i].

    The mask is applied before normalization so each surviving row of P'
    sums to exactly 1.
    """
    k, n = proportions.shape
    masked = ad.mul(proportions, mask[None, :])
    row_sums = ad.tsum(masked, axis=1, keepdims=True)
    if np.any(row_sums.data <= 0.0):
        bad = np.flatnonzero(row_sums.data[:, 0] <= 0.0)
        raise DegenerateSampleError(
            f"continuous tuples {bad.tolist()} have zero unmasked proportion mass")
    normalized = ad.mul(masked, ad.div(1.0, row_sums))
    return ad.reshape(ad.matmul(ad.reshape(values, (1, k)), normalized), (n,))


# ---------------------------------------------------------------------------
# flattening to a 2-d sparse matrix

def flat_index(tuples: np.ndarray, dims) -> np.ndarray:
    """Row-major flat index: fi(a, n) = sum_i a_i * prod_{j>i} n_j."""
    tuples = np.asarray(tuples, dtype=np.int64)
    try:
        return np.ravel_multi_index(tuple(tuples[..., t] for t in range(tuples.shape[-1])),
                                    tuple(dims))
    except ValueError as exc:
        raise IndexError(f"index tuple outside dims {tuple(dims)}") from exc


def assemble_flat_indices(tuples: np.ndarray, shape: HyperlayerShape, batch_index=None):
    """Split each weight tuple into (row, column) of the flattened matrix.

    With ``batch_index`` given, entry q is shifted onto the q-th diagonal
    block of a (b * out_size) x (b * in_size) matrix, so a whole batch of
    per-instance matrices multiplies in one pass.
    """
    m = len(shape.output_dims)
    rows = flat_index(tuples[..., :m], shape.output_dims)
    cols = flat_index(tuples[..., m:], shape.input_dims)
    if batch_index is not None:
        batch_index = np.asarray(batch_index, dtype=np.int64)
        rows = rows + batch_index * shape.out_size
        cols = cols + batch_index * shape.in_size
    return rows, cols


def sparse_matmul(values, tuples: np.ndarray, shape: HyperlayerShape, x):
    """Contract a sparse weight tensor with a dense input.

    ``x`` is a single input of ``shape.input_dims`` or a batch with a
    leading batch axis; one weight tensor serves the whole batch.
    """
    rows, cols = assemble_flat_indices(tuples, shape)
    x = ad.as_tensor(x)
    if x.shape == tuple(shape.input_dims):
        x_flat = ad.reshape(x, (shape.in_size,))
        y = ad.coo_matmul(values, rows, cols, shape.out_size, x_flat)
        return ad.reshape(y, shape.output_dims)
    b = x.shape[0]
    if x.shape[1:] != tuple(shape.input_dims):
        raise ValueError(f"input shape {x.shape} does not match {shape.input_dims}")
    x_flat = ad.transpose(ad.reshape(x, (b, shape.in_size)))
    y = ad.coo_matmul(values, rows, cols, shape.out_size, x_flat)
    return ad.reshape(ad.transpose(y), (b,) + tuple(shape.output_dims))


# ---------------------------------------------------------------------------
# the layer

class SparseLayer:
    """k learnable continuous index tuples with spreads and values."""

    def __init__(self, shape: HyperlayerShape, k: int, rng, tau: float = 0.1,
                 value_scale: float = 0.1):
        self.shape = shape
        self.k = k
        self.tau = tau
        r = shape.rank
        # logit-uniform spread covers the index hyperrectangle at init
        u = rng.uniform(0.05, 0.95, size=(k, r))
        self.d_raw = Tensor(np.log(u / (1.0 - u)), requires_grad=True)
        self.sigma_raw = Tensor(np.zeros(k), requires_grad=True)
        self.values = Tensor(rng.normal(0.0, value_scale, size=k), requires_grad=True)

    def parameters(self):
        return [self.d_raw, self.sigma_raw, self.values]

    def means(self) -> Tensor:
        return tuple_means(self.d_raw, self.shape.dims)

    def variances(self) -> Tensor:
        return tuple_variances(self.sigma_raw, self.shape.dims, self.tau)

    def sample(self, cfg: SamplingConfig, rng) -> np.ndarray:
        """Draw the integer tuples for one pass (constants thereafter)."""
        cfg.validate(self.shape.dims)
        return sample_integer_tuples(self.means().data, cfg, self.shape.dims, rng)

    def forward_with_sample(self, tuples: np.ndarray, x, mask=None,
                            tuple_subset=None, params=None):
        """Differentiable forward for a fixed integer sample.

        ``tuple_subset`` restricts the pass to some continuous tuples (their
        proportion rows are independent, so partial outputs sum to the full
        one). ``params`` overrides (d_raw, sigma_raw, values) nodes, used by
        the finite-difference harness.
        """
        d_raw, sigma_raw, values = params if params is not None else (
            self.d_raw, self.sigma_raw, self.values)
        if tuple_subset is not None:
            d_raw = ad.index_rows(d_raw, tuple_subset)
            sigma_raw = ad.index_rows(sigma_raw, tuple_subset)
            values = ad.index_rows(values, tuple_subset)
        if mask is None:
            mask = duplicate_mask(tuples)
        means = tuple_means(d_raw, self.shape.dims)
        variances = tuple_variances(sigma_raw, self.shape.dims, self.tau)
        p = gaussian_proportions(means, variances, tuples)
        v_prime = distribute_values(p, mask, values)
        return sparse_matmul(v_prime, tuples, self.shape, x)

    def forward(self, x, cfg: SamplingConfig, rng):
        """Sample integer tuples and run the differentiable forward."""
        return self.forward_with_sample(self.sample(cfg, rng), x)

    def rounded_tuples(self) -> np.ndarray:
        dims = np.asarray(self.shape.dims, dtype=np.int64)
        return np.clip(np.rint(self.means().data).astype(np.int64), 0, dims - 1)

    def eval_forward(self, x):
        """Deterministic rounded mode: W from round(d) with the raw values.

        Duplicate rounded tuples resolve by summing their values. No
        sampling, no gradients.
        """
        tuples = self.rounded_tuples()
        xin = x.detach() if isinstance(x, Tensor) else ad.as_tensor(x)
        return sparse_matmul(Tensor(self.values.data), tuples, self.shape, xin).data


def accumulate_gradients(layer: SparseLayer, tuples: np.ndarray, x, loss_fn,
                         chunks: int = 1) -> float:
    """Run forward+backward in chunks of continuous tuples, summing gradients.

    Every pass sees the full output (the other chunks' contributions enter
    as constants), so the summed parameter gradients equal the single-pass
    gradients while the proportion matrix never exceeds a chunk of rows.
    """
    if not 1 <= chunks <= layer.k:
        raise ValueError(f"chunks must be in [1, {layer.k}]")
    groups = np.array_split(np.arange(layer.k), chunks)
    mask = duplicate_mask(tuples)
    partials = [layer.forward_with_sample(tuples, x, mask=mask, tuple_subset=g).data
                for g in groups]
    total = partials[0].copy()
    for p in partials[1:]:
        total += p
    loss_value = None
    for g, part in zip(groups, partials):
        with Tape() as tape:
            y_g = layer.forward_with_sample(tuples, x, mask=mask, tuple_subset=g)
            y = ad.add(y_g, total - part)
            loss = loss_fn(y)
            tape.backward(loss)
        if loss_value is None:
            loss_value = loss.item()
    return loss_value
