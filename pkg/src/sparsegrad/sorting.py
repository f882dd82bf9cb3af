"""Differentiable quicksort built from relaxed half-permutations.

A half-permutation of order d moves each element of every contiguous chunk
of size n/2^(d-1) into the chunk's lower or upper half according to a
binary vector, preserving relative order. Composing log2(n) of them with
median pivots sorts the input. The relaxation samples valid half-permutation
vectors, weights them by differentiable proportions derived from the
sigmoid-relaxed comparisons against the chunk medians, and mixes the
resulting permutation matrices; columns of the mixture sum to one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor
from .cantor import cantor_code, segmented_first_occurrence_mask
from .sparse import DegenerateSampleError

log = logging.getLogger(__name__)


def chunk_layout(n: int, order: int):
    """Number of chunks and chunk size for a half-permutation order."""
    if n < 2 or n & (n - 1):
        raise ValueError(f"length must be a power of two, got {n}")
    size = n >> (order - 1)
    if size < 2:
        raise ValueError(f"order {order} too deep for length {n}")
    return n // size, size


# ---------------------------------------------------------------------------
# medians and splits

def chunk_medians(keys: Tensor, order: int) -> Tensor:
    """Per-element median of its chunk, on the graph.

    The median of an even-length chunk is the mean of its two central order
    statistics, which guarantees balanced splits for distinct keys. The
    choice of which elements are central is made from the current values;
    the mean itself stays differentiable.
    """
    b, n = keys.shape
    n_chunks, size = chunk_layout(n, order)
    data = keys.data.reshape(b, n_chunks, size)
    idx = np.argsort(data, axis=2, kind="stable")
    base = (np.arange(b)[:, None] * n + np.arange(n_chunks)[None, :] * size)
    flat = ad.reshape(keys, (b * n,))
    lo = ad.index_rows(flat, (base + idx[:, :, size // 2 - 1]).ravel())
    hi = ad.index_rows(flat, (base + idx[:, :, size // 2]).ravel())
    med = ad.mul(ad.add(lo, hi), 0.5)
    per_elem = ad.mul(ad.reshape(med, (b, n_chunks, 1)), np.ones((1, 1, size)))
    return ad.reshape(per_elem, (b, n))


def relaxed_split(keys: Tensor, order: int, sharpness: float):
    """Sigmoid relaxation of the below/above-median split.

    Returns (logits, o_prime) where logits = (keys - median) * sharpness and
    o_prime = sigmoid(logits); both differentiable through the keys and the
    median.
    """
    med = chunk_medians(keys, order)
    logits = ad.mul(ad.sub(keys, med), float(sharpness))
    return logits, ad.sigmoid(logits)


def hard_split(keys: np.ndarray, order: int) -> np.ndarray:
    """Balanced binary split per chunk: 1 for the upper half of the ranks.

    Ties straddling the median break by original index (lower index goes
    below); this keeps every chunk balanced.
    """
    b, n = keys.shape
    n_chunks, size = chunk_layout(n, order)
    data = keys.reshape(b, n_chunks, size)
    idx = np.argsort(data, axis=2, kind="stable")
    srt = np.take_along_axis(data, idx, axis=2)
    if np.any(srt[:, :, size // 2 - 1] == srt[:, :, size // 2]):
        log.debug("tie straddling a chunk median; broken by original index")
    ranks = np.empty_like(idx)
    np.put_along_axis(ranks, idx, np.broadcast_to(np.arange(size), idx.shape).copy(), axis=2)
    return (ranks >= size // 2).astype(np.int64).reshape(b, n)


def rounded_split(o_prime: np.ndarray, order: int) -> np.ndarray:
    """Round a relaxed split to binary, repairing unbalanced chunks.

    Values at exactly 0.5 round to 0. If ties leave a chunk unbalanced, the
    lowest-indexed entries of the majority side flip until counts match.
    """
    b, n = o_prime.shape
    n_chunks, size = chunk_layout(n, order)
    o = (o_prime > 0.5).astype(np.int64).reshape(b, n_chunks, size)
    ones = o.sum(axis=2)
    half = size // 2
    if np.any(ones != half):
        for bi, ci in zip(*np.nonzero(ones != half)):
            chunk = o[bi, ci]
            excess = int(chunk.sum()) - half
            flip_from, flip_to = (1, 0) if excess > 0 else (0, 1)
            for pos in range(size):
                if excess == 0:
                    break
                if chunk[pos] == flip_from:
                    chunk[pos] = flip_to
                    excess += -1 if flip_from == 1 else 1
            log.debug("repaired unbalanced rounded chunk (%d, %d)", bi, ci)
    return o.reshape(b, n)


# ---------------------------------------------------------------------------
# binary vectors to permutations

def half_perm_rows(o: np.ndarray, order: int) -> np.ndarray:
    """Destination row per element: two resetting cumulative sums.

    Element i of a chunk goes to chunk_start + rank-among-zeros if o[i]=0,
    else to chunk_start + size/2 + rank-among-ones, so below-median elements
    fill the lower half in order and the result sorts ascending.
    """
    o = np.asarray(o, dtype=np.int64)
    n = o.shape[-1]
    n_chunks, size = chunk_layout(n, order)
    oc = o.reshape(o.shape[:-1] + (n_chunks, size))
    if np.any(oc.sum(axis=-1) != size // 2):
        raise ValueError("binary vector is not balanced within every chunk")
    c_up = np.cumsum(oc, axis=-1)
    c_low = np.cumsum(1 - oc, axis=-1)
    r_local = (1 - oc) * (c_low - 1) + oc * (size // 2 + c_up - 1)
    r = r_local + (np.arange(n_chunks) * size)[:, None]
    return r.reshape(o.shape)


def invert_rows(rows: np.ndarray) -> np.ndarray:
    """Inverse permutation along the last axis: inv[rows[i]] = i."""
    return np.argsort(rows, axis=-1, kind="stable")


class HalfPermTableBank:
    """Precomputed balanced binary vectors per (length, order).

    Each table starts from the identity pattern (zeros then ones per chunk)
    and permutes every chunk independently, exactly the valid vectors of
    that order. Tables regenerate deterministically from the seed stream.
    """

    def __init__(self, seed_stream, rows: int = 50_000):
        self._stream = seed_stream
        self._rows = rows
        self._tables = {}

    def get(self, n: int, order: int) -> np.ndarray:
        key = (n, order)
        if key not in self._tables:
            n_chunks, size = chunk_layout(n, order)
            rng = self._stream.child(f"half-perm-table-{n}-{order}").generator()
            base = np.concatenate([np.zeros(size // 2, np.int64), np.ones(size // 2, np.int64)])
            table = np.tile(base, (self._rows, n_chunks))
            for c in range(n_chunks):
                block = table[:, c * size:(c + 1) * size]
                table[:, c * size:(c + 1) * size] = rng.permuted(block, axis=1)
            self._tables[key] = table
        return self._tables[key]


# ---------------------------------------------------------------------------
# the relaxed operator

@dataclass
class RelaxedHalfPerm:
    """A convex mixture of sampled half-permutation matrices.

    ``rows[b, s]`` is the destination sequence of spec s for instance b and
    ``weights`` its differentiable mixture weight; every column (and row) of
    the mixed matrix sums to the weight total, 1.
    """

    n: int
    order: int
    rows: np.ndarray        # (b, S, n) int
    inv_rows: np.ndarray    # (b, S, n) int
    weights: Tensor         # (b, S)
    specs: np.ndarray       # (b, S, n) binary vectors

    def _mix(self, x: Tensor, index: np.ndarray) -> Tensor:
        b, s, n = index.shape
        base = (np.arange(b) * n)[:, None, None]
        idx = base + index
        if x.ndim == 2:
            gathered = ad.index_rows(ad.reshape(x, (b * n,)), idx)
            w = ad.reshape(self.weights, (b, s, 1))
        else:
            m = x.shape[2]
            gathered = ad.index_rows(ad.reshape(x, (b * n, m)), idx)
            w = ad.reshape(self.weights, (b, s, 1, 1))
        return ad.tsum(ad.mul(gathered, w), axis=1)

    def apply(self, x: Tensor) -> Tensor:
        """Mix of P_s @ x over specs; x is (b, n) or (b, n, m)."""
        return self._mix(ad.as_tensor(x), self.inv_rows)

    def apply_transpose(self, x: Tensor) -> Tensor:
        """Mix of P_s.T @ x over specs."""
        return self._mix(ad.as_tensor(x), self.rows)

    def dense(self, instance: int = 0) -> np.ndarray:
        """The mixed matrix of one instance, for inspection and tests."""
        m = np.zeros((self.n, self.n))
        w = self.weights.data[instance]
        for s in range(self.rows.shape[1]):
            m[self.rows[instance, s], np.arange(self.n)] += w[s]
        return m


def _spec_log_proportions(o_specs: np.ndarray, o_prime: Tensor, logits):
    """log p(o) = sum_i log(o'[i] if o[i] else 1 - o'[i]), vectorized.

    Built from softplus of the logits when available, which stays finite
    even where the sigmoid saturates to exactly 0 or 1 in float64.
    """
    b, s, n = o_specs.shape
    chosen = o_specs.astype(np.float64)
    if logits is not None:
        cost_one = ad.reshape(ad.softplus(ad.neg(logits)), (b, 1, n))   # -log sigmoid(z)
        cost_zero = ad.reshape(ad.softplus(logits), (b, 1, n))          # -log(1 - sigmoid(z))
        cost = ad.add(ad.mul(cost_one, chosen), ad.mul(cost_zero, 1.0 - chosen))
        return ad.neg(ad.tsum(cost, axis=2))
    p = ad.clamp(o_prime, 1e-12, 1.0 - 1e-12)
    lg = ad.reshape(ad.log(p), (b, 1, n))
    lg1m = ad.reshape(ad.log(ad.sub(1.0, p)), (b, 1, n))
    return ad.tsum(ad.add(ad.mul(lg, chosen), ad.mul(lg1m, 1.0 - chosen)), axis=2)


def sample_half_perms(o_prime: Tensor, order: int, a: int, table: np.ndarray | None,
                      rng, logits: Tensor | None = None) -> RelaxedHalfPerm:
    """Sample a half-permutation specs plus round(o'), mix by proportions.

    Duplicate destination sequences (detected by their Cantor codes) keep
    only their first occurrence; the surviving proportions normalize to sum
    one, which makes every column of the mixed matrix sum to one.
    """
    b, n = o_prime.shape
    o_round = rounded_split(o_prime.data, order)
    if a > 0:
        if table is None:
            raise ValueError("a > 0 requires a precomputed half-permutation table")
        picks = table[rng.integers(0, table.shape[0], size=(b, a))]
        specs = np.concatenate([o_round[:, None, :], picks], axis=1)
    else:
        specs = o_round[:, None, :]
    rows = half_perm_rows(specs, order)

    codes = np.empty((b, specs.shape[1]), dtype=object)
    for bi in range(b):
        for si in range(specs.shape[1]):
            codes[bi, si] = cantor_code(rows[bi, si])
    mask = segmented_first_occurrence_mask(codes)

    log_p = _spec_log_proportions(specs, o_prime, logits)
    shift = np.where(mask > 0, log_p.data, -np.inf).max(axis=1, keepdims=True)
    unnorm = ad.mul(ad.exp(ad.sub(log_p, shift)), mask)
    denom = ad.tsum(unnorm, axis=1, keepdims=True)
    if np.any(denom.data <= 0.0):
        raise DegenerateSampleError("all sampled half-permutations have zero proportion")
    weights = ad.div(unnorm, denom)
    return RelaxedHalfPerm(n=n, order=order, rows=rows, inv_rows=invert_rows(rows),
                           weights=weights, specs=specs)


def hard_half_perm(keys: np.ndarray, order: int) -> RelaxedHalfPerm:
    """The exact half-permutation of the hard median split (weight 1)."""
    b, n = keys.shape
    specs = hard_split(keys, order)[:, None, :]
    rows = half_perm_rows(specs, order)
    return RelaxedHalfPerm(n=n, order=order, rows=rows, inv_rows=invert_rows(rows),
                           weights=Tensor(np.ones((b, 1))), specs=specs)


# ---------------------------------------------------------------------------
# the sort

@dataclass
class SortTrace:
    """States and stage operators of one differentiable quicksort pass."""

    states: list            # x_0 .. x_d, (b, n, m) nodes
    key_states: list        # keys after each stage
    stages: list            # RelaxedHalfPerm per stage

    @property
    def output(self) -> Tensor:
        return self.states[-1]


def quicksort_forward(items, keys, *, a: int, sharpness: float, tables, rng,
                      hard: bool = False) -> SortTrace:
    """Compose log2(n) relaxed (or hard) half-permutations with median pivots.

    The keys ride through the same permutations as the items, so every
    stage's medians and splits are computed on the state as sorted so far.
    """
    items = ad.as_tensor(items)
    keys = ad.as_tensor(keys)
    b, n = keys.shape
    depth = int(np.log2(n))
    if 2 ** depth != n:
        raise ValueError(f"sort length must be a power of two, got {n}")
    states, key_states, stages = [items], [keys], []
    for order in range(1, depth + 1):
        if hard:
            hp = hard_half_perm(keys.data, order)
        else:
            logits, o_prime = relaxed_split(keys, order, sharpness)
            table = tables.get(n, order) if a > 0 else None
            hp = sample_half_perms(o_prime, order, a, table, rng, logits=logits)
        items = hp.apply(items)
        keys = hp.apply(keys)
        states.append(items)
        key_states.append(keys)
        stages.append(hp)
    return SortTrace(states=states, key_states=key_states, stages=stages)


def intermediate_loss(trace: SortTrace, target) -> Tensor:
    """Stagewise binary cross-entropy against the reverse-fed target.

    The sorted target flows backwards through the transposed stage matrices;
    the loss sums bce(x_i, t_i) over stages, so gradients reach the keys
    through the forward chain and the reversed one.
    """
    target = ad.as_tensor(target)
    d = len(trace.stages)
    t = target
    targets = [None] * (d + 1)
    targets[d] = t
    for i in range(d, 0, -1):
        t = trace.stages[i - 1].apply_transpose(t)
        targets[i - 1] = t
    loss = None
    for i in range(1, d + 1):
        term = ad.bce_loss(trace.states[i], targets[i])
        loss = term if loss is None else ad.add(loss, term)
    return loss


def evaluate_permutation_error(keys: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of instances whose key order differs from the true order."""
    perm = np.argsort(keys, axis=1, kind="stable")
    true_perm = np.argsort(truth, axis=1, kind="stable")
    return float(np.mean(np.any(perm != true_perm, axis=1)))


# ---------------------------------------------------------------------------
# synthetic task

@dataclass
class SortBatch:
    items: np.ndarray       # (b, n, m) encodings in [0, 1]
    hidden: np.ndarray      # (b, n) scalar values the encodings carry
    target: np.ndarray      # items sorted ascending by hidden value


def synthetic_sort_batch(rng, batch: int, n: int, m: int, noise: float) -> SortBatch:
    """Noisy encodings of hidden scalars, with their correctly sorted order.

    Hidden values are redrawn for any instance with a duplicate, so the true
    ordering is unique.
    """
    hidden = rng.uniform(0.0, 1.0, size=(batch, n))
    while True:
        srt = np.sort(hidden, axis=1)
        bad = np.nonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))[0]
        if bad.size == 0:
            break
        hidden[bad] = rng.uniform(0.0, 1.0, size=(bad.size, n))
    items = np.clip(hidden[:, :, None] + rng.uniform(-noise, noise, size=(batch, n, m)), 0.0, 1.0)
    order = np.argsort(hidden, axis=1, kind="stable")
    target = items[np.arange(batch)[:, None], order]
    return SortBatch(items=items, hidden=hidden, target=target)


class KeyNetwork:
    """Small MLP mapping one item encoding to a scalar key."""

    def __init__(self, m: int, hidden: int, rng):
        self.net = MLP(m, [hidden], 1, rng)

    def __call__(self, items) -> Tensor:
        items = ad.as_tensor(items)
        b, n, m = items.shape
        keys = self.net(ad.reshape(items, (b * n, m)))
        return ad.reshape(keys, (b, n))

    def parameters(self):
        return self.net.parameters()
