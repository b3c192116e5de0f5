"""Numba-compiled twins of the kernels in `kernels_numpy`.

Explicit loops let numba fuse what the numpy path spells out as chains of
temporaries. Kernels are compiled sequential (no prange): the training loop
is single-threaded by contract and reduction order must stay fixed so runs
are bit-reproducible. cache=True keeps recompiles off the critical path
after the first import.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_JIT = dict(cache=True, fastmath=False)

F32 = np.float32


@njit(**_JIT)
def relu_fwd(x):
    out = np.empty_like(x)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        v = flat_x[i]
        flat_o[i] = v if v > 0.0 else F32(0.0)
    return out


@njit(**_JIT)
def relu_bwd(x, g):
    out = np.empty_like(g)
    flat_x = x.ravel()
    flat_g = g.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        flat_o[i] = flat_g[i] if flat_x[i] > 0.0 else F32(0.0)
    return out


@njit(**_JIT)
def sigmoid_fwd(x):
    out = np.empty_like(x)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        v = flat_x[i]
        if v >= 0.0:
            flat_o[i] = F32(1.0) / (F32(1.0) + np.exp(-v))
        else:
            e = np.exp(v)
            flat_o[i] = e / (F32(1.0) + e)
    return out


@njit(**_JIT)
def sigmoid_bwd(y, g):
    out = np.empty_like(g)
    flat_y = y.ravel()
    flat_g = g.ravel()
    flat_o = out.ravel()
    for i in range(flat_y.size):
        flat_o[i] = flat_g[i] * flat_y[i] * (F32(1.0) - flat_y[i])
    return out


@njit(**_JIT)
def softmax_fwd(x, inv_t):
    out = np.empty_like(x)
    it = F32(inv_t)
    for i in range(x.shape[0]):
        m = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > m:
                m = x[i, j]
        s = F32(0.0)
        for j in range(x.shape[1]):
            e = np.exp((x[i, j] - m) * it)
            out[i, j] = e
            s += e
        for j in range(x.shape[1]):
            out[i, j] /= s
    return out


@njit(**_JIT)
def softmax_bwd(y, g, inv_t):
    out = np.empty_like(y)
    it = F32(inv_t)
    for i in range(y.shape[0]):
        dot = F32(0.0)
        for j in range(y.shape[1]):
            dot += g[i, j] * y[i, j]
        for j in range(y.shape[1]):
            out[i, j] = (g[i, j] - dot) * y[i, j] * it
    return out


@njit(**_JIT)
def log_eps_fwd(x, eps):
    out = np.empty_like(x)
    e = F32(eps)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        flat_o[i] = np.log(flat_x[i] + e)
    return out


@njit(**_JIT)
def log_eps_bwd(x, g, eps):
    out = np.empty_like(g)
    e = F32(eps)
    flat_x = x.ravel()
    flat_g = g.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        flat_o[i] = flat_g[i] / (flat_x[i] + e)
    return out


@njit(**_JIT)
def nll_rows(probs, labels):
    out = np.empty(probs.shape[0], dtype=np.float32)
    floor = F32(1e-9)
    for i in range(probs.shape[0]):
        out[i] = -np.log(probs[i, labels[i]] + floor)
    return out


@njit(**_JIT)
def sgd_step(p, g, lr):
    flat_p = p.ravel()
    flat_g = g.ravel()
    step = F32(lr)
    for i in range(flat_p.size):
        flat_p[i] -= step * flat_g[i]


@njit(**_JIT)
def adam_step(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    flat_p = p.ravel()
    flat_g = g.ravel()
    flat_m = m.ravel()
    flat_v = v.ravel()
    f_lr = F32(lr)
    f_b1 = F32(b1)
    f_b2 = F32(b2)
    f_eps = F32(eps)
    f_c1 = F32(1.0 - b1)
    f_c2 = F32(1.0 - b2)
    f_bc1 = F32(bc1)
    f_bc2 = F32(bc2)
    for i in range(flat_p.size):
        gi = flat_g[i]
        mi = f_b1 * flat_m[i] + f_c1 * gi
        vi = f_b2 * flat_v[i] + f_c2 * gi * gi
        flat_m[i] = mi
        flat_v[i] = vi
        flat_p[i] -= f_lr * (mi / f_bc1) / (np.sqrt(vi / f_bc2) + f_eps)


def warmup():
    """Force-compile every kernel on tiny inputs (one-time JIT cost)."""
    x = np.array([[0.5, -0.5], [1.0, 2.0]], dtype=np.float32)
    g = np.ones_like(x)
    labels = np.array([0, 1], dtype=np.int64)
    relu_bwd(x, relu_fwd(x) * 0 + g)
    sigmoid_bwd(sigmoid_fwd(x), g)
    softmax_bwd(softmax_fwd(x, 1.0), g, 1.0)
    log_eps_bwd(np.abs(x), g, 1e-9)
    log_eps_fwd(np.abs(x), 1e-9)
    nll_rows(softmax_fwd(x, 1.0), labels)
    p = x.copy()
    sgd_step(p, g, 0.1)
    adam_step(p, g, np.zeros_like(p), np.zeros_like(p),
              1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
