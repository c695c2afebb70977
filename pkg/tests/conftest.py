"""Shared test helpers: the finite-difference gradient oracle and error metric."""

import numpy as np


def numeric_grad(fn, arrays, h=1e-4):
    """Central-difference gradient of scalar fn() in each array entry.

    `fn` must read the arrays in place (they are temporarily perturbed one
    entry at a time). Arrays must be float64 for the differences to resolve.
    """
    grads = []
    for arr in arrays:
        assert arr.dtype == np.float64, "finite differences need float64 parameters"
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn()
            flat[i] = orig - h
            f_minus = fn()
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    """max over entries of |a - n| / max(1e-4, |a|, |n|).

    The 1e-4 floor keeps near-zero entries from blowing the ratio up on pure
    rounding noise; anything above it is judged on true relative error.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        denom = np.maximum(1e-4, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
