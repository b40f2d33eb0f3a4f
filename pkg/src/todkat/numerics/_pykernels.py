"""Pure-numpy kernel backend.

Every function here has a signature-identical twin in ``_ckernels.pyx``.
Arrays are float64 and C-contiguous; matrices are 2-d, vectors 1-d.
Kernels never record autodiff state; the tape layer composes them.
"""

import numpy as np

NAME = "python"

_NEG_BIG = -1e9  # additive mask value; exp() underflows to exactly 0.0


def gemm(a, b, ta=False, tb=False):
    """op(a) @ op(b) where op transposes when the flag is set."""
    x = a.T if ta else a
    y = b.T if tb else b
    return np.ascontiguousarray(x @ y)


def ew_add(a, b):
    return a + b


def ew_sub(a, b):
    return a - b


def ew_mul(a, b):
    return a * b


def add_rowvec(x, v):
    return x + v[None, :]


def mul_rowvec(x, v):
    return x * v[None, :]


def scal_add(a, s):
    return a + s


def scal_mul(a, s):
    return a * s


def tanh_fwd(x):
    return np.tanh(x)


def tanh_bwd(y, gy):
    return gy * (1.0 - y * y)


def sigmoid_fwd(x):
    # two-branch form, stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, gy):
    return gy * y * (1.0 - y)


def exp_fwd(x):
    # overflow to inf is allowed (the tensor layer's debug mode traps it)
    with np.errstate(over="ignore"):
        return np.exp(x)


def log_fwd(x):
    return np.log(x)


def clamp_fwd(x, lo, hi):
    return np.clip(x, lo, hi)


def clamp_bwd(x, gy, lo, hi):
    return gy * ((x > lo) & (x < hi))


def softmax_rows(x):
    """Row-wise softmax of a 2-d array, max-shifted for stability."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(y, gy):
    # gx = y * (gy - sum(gy * y, axis=1))
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_rows(x, eps):
    """Normalize each row to zero mean, unit variance. Returns (y, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * rstd[:, None]
    return y, rstd


def layernorm_rows_bwd(y, rstd, gy):
    n = y.shape[1]
    mg = gy.mean(axis=1, keepdims=True)
    mgy = (gy * y).mean(axis=1, keepdims=True)
    return rstd[:, None] * (gy - mg - y * mgy)


def ce_rows(logits, targets, ignore_id):
    """Per-row cross-entropy against integer targets.

    Rows whose target equals ignore_id contribute loss 0. Returns
    (losses[m], probs[m, v]); probs are the softmax rows, valid for
    every row (backward zeroes the ignored ones).
    """
    probs = softmax_rows(logits)
    m = logits.shape[0]
    losses = np.zeros(m)
    for i in range(m):
        t = targets[i]
        if t == ignore_id:
            continue
        losses[i] = -np.log(probs[i, t])
    return losses, probs


def ce_rows_bwd(probs, targets, glosses, ignore_id):
    gx = probs * glosses[:, None]
    for i in range(probs.shape[0]):
        t = targets[i]
        if t == ignore_id:
            gx[i, :] = 0.0
        else:
            gx[i, t] -= glosses[i]
    return gx


def gather_rows(table, ids):
    return table[ids].copy()


def scatter_add_rows(gtable, ids, gy):
    np.add.at(gtable, ids, gy)


def masked_fill(x, blocked, value):
    out = x.copy()
    out[blocked] = value
    return out


def sum_all(x):
    return float(x.sum())


def sum_rows(x):
    return x.sum(axis=1)


def sum_cols(x):
    return x.sum(axis=0)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """One fused Adam step with bias correction, in place on p/m/v."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
