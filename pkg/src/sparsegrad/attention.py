"""Attention as a constrained sparse layer over learned bounding boxes.

A source network reads the whole image and emits four values per glimpse,
mapped by sigmoid into image coordinates as the two corners of a bounding
box. A k x k grid of equally spaced points inside the box gives one
continuous input tuple per output pixel; each pixel then samples integer
pixels around its grid point (corners, a local box, global draws) and mixes
them by normalized Gaussian proportions, so the box coordinates receive
gradients through the proportions. The per-glimpse value scalar is shared
by all of a glimpse's connections.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor
from .cantor import pair_codes_u64, segmented_first_occurrence_mask
from .sparse import DegenerateSampleError, SamplingConfig, tuple_variances

LOG_2PI = float(np.log(2.0 * np.pi))


def grid_fractions(k: int) -> np.ndarray:
    """Relative positions of k equally spaced points spanning [0, 1]."""
    if k == 1:
        return np.array([0.5])
    return np.arange(k) / (k - 1.0)


def bbox_to_grid(boxes: Tensor, k: int) -> Tensor:
    """k*k continuous (row, col) tuples equally spaced in each box.

    ``boxes`` is (q, 4) already in image coordinates, ordered
    (row_lo, col_lo, row_hi, col_hi). No ordering is imposed between the
    corners; an inverted box simply yields a flipped grid.
    """
    q = boxes.shape[0]
    fr = grid_fractions(k)[None, :]
    pick = [ad.matmul(boxes, e[:, None]) for e in np.eye(4)]   # (q, 1) each
    rows = ad.add(pick[0], ad.mul(ad.sub(pick[2], pick[0]), fr))   # (q, k)
    cols = ad.add(pick[1], ad.mul(ad.sub(pick[3], pick[1]), fr))
    rows_g = ad.mul(ad.reshape(rows, (q, k, 1, 1)), np.ones((1, 1, k, 1)))
    cols_g = ad.mul(ad.reshape(cols, (q, 1, k, 1)), np.ones((1, k, 1, 1)))
    return ad.reshape(ad.concat([rows_g, cols_g], axis=3), (q, k * k, 2))


def _sample_pixel_tuples(grid: np.ndarray, dims, cfg: SamplingConfig, rng) -> np.ndarray:
    """Integer (row, col) samples per grid point: corners + local + global.

    Returns (q, k2, s, 2) with s = 4 + a_local + a_global. In rounded mode
    (a_local = a_global = 0 is *not* that; see ``rounded_pixel_tuples``)
    the corner block is still present.
    """
    q, k2, _ = grid.shape
    dims = np.asarray(dims, dtype=np.int64)
    lo = np.floor(grid).astype(np.int64)
    bits = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int64)
    corners = np.clip(lo[:, :, None, :] + bits[None, None, :, :], 0, dims - 1)
    parts = [corners]
    if cfg.a_local:
        region = np.asarray(cfg.region, dtype=np.int64)
        center = np.rint(grid).astype(np.int64)
        start = np.clip(center - (region - 1) // 2, 0, dims - region)
        parts.append(start[:, :, None, :]
                     + rng.integers(0, region, size=(q, k2, cfg.a_local, 2)))
    if cfg.a_global:
        parts.append(rng.integers(0, dims, size=(q, k2, cfg.a_global, 2)))
    return np.concatenate(parts, axis=2)


def rounded_pixel_tuples(grid: np.ndarray, dims) -> np.ndarray:
    """One integer tuple per grid point: round and clamp. Shape (q, k2, 1, 2)."""
    dims = np.asarray(dims, dtype=np.int64)
    return np.clip(np.rint(grid).astype(np.int64), 0, dims - 1)[:, :, None, :]


def glimpse_values(grid: Tensor, tuples: np.ndarray, variances: Tensor,
                   value: Tensor) -> Tensor:
    """Normalized Gaussian proportions times the glimpse value, per sample.

    ``grid`` is (q, k2, 2), ``tuples`` (q, k2, s, 2), ``variances`` and
    ``value`` broadcastable to (q, 1, 1). Duplicate samples within one grid
    point's row are masked before normalization, so each output pixel
    receives exactly its value's mass.
    """
    q, k2, s, _ = tuples.shape
    codes = pair_codes_u64(tuples[..., 0], tuples[..., 1])
    mask = segmented_first_occurrence_mask(codes.reshape(q * k2, s)).reshape(q, k2, s)

    mean = ad.reshape(grid, (q, k2, 1, 2))
    diff = ad.sub(np.asarray(tuples, dtype=np.float64), mean)
    # divide on the small (q, 1, 1, 2) side; the big arrays only multiply
    inv_two_var = ad.div(0.5, variances)
    quad = ad.tsum(ad.mul(ad.mul(diff, diff), inv_two_var), axis=3)
    log_norm = ad.add(ad.mul(ad.tsum(ad.log(variances), axis=3), 0.5), LOG_2PI)
    p = ad.mul(ad.exp(ad.neg(ad.add(quad, log_norm))), mask)
    sums = ad.tsum(p, axis=2, keepdims=True)
    if np.any(sums.data <= 0.0):
        raise DegenerateSampleError("a glimpse pixel has zero unmasked proportion mass")
    return ad.mul(p, ad.mul(ad.div(1.0, sums), value))


class AttentionModel:
    """Source network, per-glimpse sparse gather, and classification head."""

    def __init__(self, image_size: int, glimpse_size: int, glimpses: int,
                 n_classes: int, rng, tau: float = 0.1,
                 source_hidden=(128, 64), head_hidden: int = 128):
        if glimpse_size > image_size:
            raise ValueError("glimpse must not exceed the image")
        self.image_size = image_size
        self.glimpse_size = glimpse_size
        self.glimpses = glimpses
        self.n_classes = n_classes
        self.tau = tau
        hw = image_size * image_size
        self.source = MLP(hw, list(source_hidden), 4 * glimpses, rng)
        # start with near-full-image boxes instead of collapsed center points
        edge = np.log(0.9 / 0.1)
        self.source.layers[-1].bias.data[:] = np.tile([-edge, -edge, edge, edge], glimpses)
        self.head = MLP(glimpses * glimpse_size ** 2, [head_hidden], n_classes, rng)
        self.value = Tensor(np.ones(glimpses), requires_grad=True)
        self.sigma_raw = Tensor(np.zeros(glimpses), requires_grad=True)

    def parameters(self):
        return self.source.parameters() + self.head.parameters() + [self.value, self.sigma_raw]

    def boxes(self, images: np.ndarray) -> Tensor:
        """Sigmoid-mapped box corners in image coordinates, (b * g, 4)."""
        b = images.shape[0]
        raw = self.source(images.reshape(b, -1))
        scale = np.tile([self.image_size, self.image_size], 2).astype(np.float64)
        return ad.mul(ad.sigmoid(ad.reshape(raw, (b * self.glimpses, 4))), scale)

    def _glimpses(self, images: np.ndarray, tuples: np.ndarray, grid: Tensor) -> Tensor:
        b = images.shape[0]
        g, k = self.glimpses, self.glimpse_size
        q, k2 = b * g, k * k
        glimpse_ids = np.tile(np.arange(g), b)
        image_ids = np.repeat(np.arange(b), g)
        var = tuple_variances(self.sigma_raw, (self.image_size, self.image_size), self.tau)
        var_q = ad.reshape(ad.index_rows(var, glimpse_ids), (q, 1, 1, 2))
        val_q = ad.reshape(ad.index_rows(self.value, glimpse_ids), (q, 1, 1))
        values = glimpse_values(grid, tuples, var_q, val_q)

        s = tuples.shape[2]
        out_idx = (np.arange(q) * k2)[:, None, None] + np.arange(k2)[None, :, None]
        out_idx = np.broadcast_to(out_idx, (q, k2, s)).ravel()
        in_idx = (image_ids[:, None, None] * self.image_size ** 2
                  + tuples[..., 0] * self.image_size + tuples[..., 1]).ravel()
        flat = ad.coo_matmul(ad.reshape(values, (q * k2 * s,)), out_idx, in_idx,
                             q * k2, images.reshape(-1))
        return ad.reshape(flat, (b, g * k2))

    def forward(self, images: np.ndarray, cfg: SamplingConfig, rng) -> Tensor:
        """Training-mode logits: sampled connections, differentiable boxes."""
        cfg.validate((self.image_size, self.image_size))
        grid = bbox_to_grid(self.boxes(images), self.glimpse_size)
        tuples = _sample_pixel_tuples(grid.data, (self.image_size, self.image_size), cfg, rng)
        return self.head(self._glimpses(images, tuples, grid))

    def forward_eval(self, images: np.ndarray) -> np.ndarray:
        """Rounded-mode logits: each pixel gathers its nearest input pixel."""
        grid = bbox_to_grid(self.boxes(images), self.glimpse_size)
        tuples = rounded_pixel_tuples(grid.data, (self.image_size, self.image_size))
        return self.head(self._glimpses(images, tuples, grid)).data

    def glimpse_eval(self, images: np.ndarray) -> np.ndarray:
        """Rounded-mode glimpse contents, (b, g * k * k)."""
        grid = bbox_to_grid(self.boxes(images), self.glimpse_size)
        tuples = rounded_pixel_tuples(grid.data, (self.image_size, self.image_size))
        return self._glimpses(images, tuples, grid).data


# ---------------------------------------------------------------------------
# synthetic patch task

@dataclass
class PatchTask:
    """Classify which fixed binary pattern was pasted into a noisy image."""

    patterns: np.ndarray    # (n_classes, p, p) binary
    image_size: int

    @property
    def n_classes(self):
        return len(self.patterns)

    @property
    def patch_size(self):
        return self.patterns.shape[1]

    def sample(self, rng, count: int):
        """Images with uniform background noise in [0, 0.3] and one pattern
        pasted at a uniform location at intensity 1.0; returns (images, labels)."""
        h = self.image_size
        p = self.patch_size
        images = rng.uniform(0.0, 0.3, size=(count, h, h))
        labels = rng.integers(0, self.n_classes, size=count)
        rr = rng.integers(0, h - p + 1, size=count)
        cc = rng.integers(0, h - p + 1, size=count)
        for i in range(count):
            images[i, rr[i]:rr[i] + p, cc[i]:cc[i] + p] = self.patterns[labels[i]]
        return images, labels


def make_patch_task(rng, n_classes: int, image_size: int, patch_size: int) -> PatchTask:
    """Draw distinct non-empty binary patterns for the classes."""
    if patch_size > image_size:
        raise ValueError("patch must fit inside the image")
    patterns = []
    seen = set()
    while len(patterns) < n_classes:
        pat = rng.integers(0, 2, size=(patch_size, patch_size))
        key = pat.tobytes()
        if pat.any() and key not in seen:
            seen.add(key)
            patterns.append(pat)
    return PatchTask(patterns=np.array(patterns, dtype=np.float64), image_size=image_size)


# ---------------------------------------------------------------------------
# flat binary dataset cache

_MAGIC = b"SPGD"
_VERSION = 1


def save_patch_dataset(path, images: np.ndarray, labels: np.ndarray):
    """Flat binary cache: header (magic, version, count, h, w, classes),
    then float64 images and uint8 labels."""
    images = np.ascontiguousarray(images, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    count, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, count, h, w, int(labels.max()) + 1))
        fh.write(images.tobytes())
        fh.write(labels.tobytes())


def load_patch_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a patch dataset file (magic {magic!r})")
        version, count, h, w, _ = struct.unpack("<IIIII", fh.read(20))
        if version != _VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        images = np.frombuffer(fh.read(count * h * w * 8), dtype=np.float64).reshape(count, h, w)
        labels = np.frombuffer(fh.read(count), dtype=np.uint8)
    return images.copy(), labels.copy()
