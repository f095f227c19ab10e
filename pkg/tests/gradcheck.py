"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

STEP = 1e-5
# Denominator floor so coordinates with gradients near zero are judged by
# absolute error instead of amplified round-off.
FLOOR = 1e-6


def numeric_grad(f, arrays, index):
    """d f / d arrays[index], one coordinate at a time (float64)."""
    arr = arrays[index]
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + STEP
        up = f()
        arr[i] = old - STEP
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * STEP)
    return grad


def relative_errors(analytic, numeric):
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def check(analytic, numeric, typical=1e-4, worst=1e-3, fraction=0.95):
    rel = relative_errors(analytic, numeric)
    ok_fraction = float(np.mean(rel < typical))
    return ok_fraction >= fraction and float(rel.max()) <= worst, ok_fraction, float(rel.max())
