"""Pure-numpy implementations of the hot inner-loop kernels.

This is the fallback path and the semantic reference for the numba twins in
`kernels_numba`. Every function here takes and returns float32 arrays; 2-D
inputs are (rows, cols) row-major. The two backends agree to float32
round-off (the numba versions fuse loops, so last-ulp sums may differ);
everything downstream treats the selected backend as the ground truth for
the lifetime of the process.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32


def relu_fwd(x):
    return np.maximum(x, F32(0.0))


def relu_bwd(x, g):
    return np.where(x > 0, g, F32(0.0))


def sigmoid_fwd(x):
    # Split by sign to avoid exp overflow on large negative inputs.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, g):
    return g * y * (F32(1.0) - y)


def softmax_fwd(x, inv_t):
    # Rows of x are independent logit vectors; max-subtraction keeps exp finite.
    z = (x - x.max(axis=1, keepdims=True)) * F32(inv_t)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g, inv_t):
    dot = (g * y).sum(axis=1, keepdims=True)
    return (g - dot) * y * F32(inv_t)


def log_eps_fwd(x, eps):
    return np.log(x + F32(eps))


def log_eps_bwd(x, g, eps):
    return g / (x + F32(eps))


def nll_rows(probs, labels):
    """Per-row -log(p[label] + 1e-9); labels is an int64 vector."""
    rows = np.arange(probs.shape[0])
    return -np.log(probs[rows, labels] + F32(1e-9))


def sgd_step(p, g, lr):
    p -= F32(lr) * g


def adam_step(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    """One Adam update, in place on p/m/v. bc1/bc2 are 1-beta^t corrections."""
    m *= F32(b1)
    m += F32(1.0 - b1) * g
    v *= F32(b2)
    v += F32(1.0 - b2) * g * g
    step = F32(lr) * (m / F32(bc1)) / (np.sqrt(v / F32(bc2)) + F32(eps))
    p -= step
