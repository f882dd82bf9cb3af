"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor


def finite_difference(f, arrays, h: float = 1e-5):
    """Central-difference gradients of scalar f w.r.t. each array.

    ``f`` receives plain numpy arrays and returns a float; it must be
    deterministic (fix any random sample before calling).
    """
    grads = []
    base = [np.array(a, dtype=np.float64) for a in arrays]
    for ai, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            fp = f(*base)
            flat[j] = keep - h
            fm = f(*base)
            flat[j] = keep
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def taped_gradients(build, arrays):
    """Gradients of a taped scalar: build(params...) -> loss node."""
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*params)
        tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params], loss.item()


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, floor) over all arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def check_gradients(build, arrays, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Assert taped gradients match central differences; returns the error."""
    analytic, _ = taped_gradients(build, arrays)

    def f(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    numeric = finite_difference(f, arrays, h=h)
    err = max_relative_error(analytic, numeric)
    if err >= tol:
        raise AssertionError(f"gradient mismatch: max relative error {err:.3e} >= {tol:.0e}")
    return err
