"""Central finite differences for checking hand-written gradients."""

import numpy as np


def numerical_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, rel_floor=1e-3, abs_floor=1e-10):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor is ``max(abs_floor, rel_floor * scale)`` with ``scale`` the
    largest gradient magnitude, so entries that are tiny next to the rest of
    the gradient are judged on the gradient's scale instead of their own.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
    floor = max(abs_floor, rel_floor * scale)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
