"""Duplicate detection for integer index tuples via Cantor codes.

Each nonnegative tuple is folded to a single integer with the nested Cantor
pairing u(a, b) = (a+b)(a+b+1)/2 + b, the codes are stable-sorted, equal
neighbors are flagged, and the flags are unsorted back, so only the first
occurrence (smallest original row index) of each tuple keeps mask 1.
"""

from __future__ import annotations

import numpy as np

MAX_CODE_BITS = 128


def cantor_pair(a: int, b: int) -> int:
    s = a + b
    return (s * (s + 1)) // 2 + b


def cantor_code(tup) -> int:
    """Fold a nonnegative integer tuple right-to-left into one integer."""
    vals = [int(v) for v in tup]
    if any(v < 0 for v in vals):
        raise ValueError("Cantor codes require nonnegative components")
    code = vals[-1]
    for v in reversed(vals[:-1]):
        code = cantor_pair(v, code)
    return code


def _codes_u64(rows: np.ndarray):
    """Vectorized uint64 codes, or None when the bound check fails."""
    mx = rows.max(axis=0).astype(object)
    bound = int(mx[-1])
    for m in mx[-2::-1]:
        bound = cantor_pair(int(m), bound)
        if bound >= 2 ** 62:
            return None
    code = rows[:, -1].astype(np.uint64)
    for t in range(rows.shape[1] - 2, -1, -1):
        s = rows[:, t].astype(np.uint64) + code
        code = (s * (s + 1)) // np.uint64(2) + code
    return code


def row_codes(rows: np.ndarray, max_bits=MAX_CODE_BITS) -> np.ndarray:
    """Cantor code per row; object dtype when codes exceed the uint64 range."""
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ValueError("expected a 2-d array of integer tuples")
    if rows.size and rows.min() < 0:
        raise ValueError("Cantor codes require nonnegative components")
    fast = _codes_u64(rows) if rows.size else np.zeros(0, dtype=np.uint64)
    if fast is not None:
        return fast
    codes = np.empty(rows.shape[0], dtype=object)
    for i in range(rows.shape[0]):
        codes[i] = cantor_code(rows[i])
    if max_bits is not None and rows.size and max(codes) >= (1 << max_bits):
        raise OverflowError(
            f"Cantor code exceeds {max_bits} bits for dims up to {rows.max()}")
    return codes


def first_occurrence_mask(rows: np.ndarray, max_bits=MAX_CODE_BITS) -> np.ndarray:
    """Float 0/1 mask keeping the first occurrence of each duplicated row."""
    rows = np.asarray(rows)
    n = rows.shape[0]
    if n == 0:
        return np.zeros(0)
    codes = row_codes(rows, max_bits=max_bits)
    order = np.argsort(codes, kind="stable")
    sorted_codes = codes[order]
    dup_sorted = np.zeros(n, dtype=bool)
    dup_sorted[1:] = sorted_codes[1:] == sorted_codes[:-1]
    mask = np.ones(n)
    mask[order[dup_sorted]] = 0.0
    return mask


def segmented_first_occurrence_mask(codes_2d: np.ndarray) -> np.ndarray:
    """Row-wise duplicate mask over precomputed codes (one segment per row)."""
    codes_2d = np.asarray(codes_2d)
    order = np.argsort(codes_2d, axis=-1, kind="stable")
    srt = np.take_along_axis(codes_2d, order, axis=-1)
    dup = np.zeros_like(codes_2d, dtype=bool)
    dup[..., 1:] = srt[..., 1:] == srt[..., :-1]
    mask = np.ones(codes_2d.shape)
    np.put_along_axis(mask, order, np.where(dup, 0.0, 1.0), axis=-1)
    return mask


def pair_codes_u64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized Cantor pairing for small nonnegative int arrays."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    s = a + b
    return (s * (s + np.uint64(1))) // np.uint64(2) + b
