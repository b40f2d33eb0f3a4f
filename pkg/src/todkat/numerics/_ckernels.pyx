# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled kernel backend: BLAS dgemm plus tight C loops.

Signature-identical to ``_pykernels``; selected at import by
``todkat.numerics.backend``. Inputs are C-contiguous float64 arrays
(the tensor layer guarantees this); in-place kernels rely on it.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp, log as c_log, sqrt as c_sqrt, tanh as c_tanh
from scipy.linalg.cython_blas cimport dgemm as blas_dgemm

NAME = "cython"


def gemm(a, b, bint ta=False, bint tb=False):
    """op(a) @ op(b); row-major arrays fed to column-major BLAS by
    computing C^T = op(b)^T op(a)^T in the transposed view."""
    cdef double[:, ::1] av = a
    cdef double[:, ::1] bv = b
    cdef int ra = av.shape[0], ca = av.shape[1]
    cdef int rb = bv.shape[0], cb = bv.shape[1]
    cdef int m = ca if ta else ra
    cdef int kk = ra if ta else ca
    cdef int n = rb if tb else cb
    cdef int kk2 = cb if tb else rb
    if kk != kk2:
        raise ValueError("gemm inner dimension mismatch")
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] cv = out
    cdef char op1 = b'T' if tb else b'N'
    cdef char op2 = b'T' if ta else b'N'
    cdef double alpha = 1.0, beta = 0.0
    blas_dgemm(&op1, &op2, &n, &m, &kk, &alpha,
               &bv[0, 0], &cb, &av[0, 0], &ca, &beta, &cv[0, 0], &n)
    return out


def ew_add(a, b):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, y = b.reshape(-1), o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = x[i] + y[i]
    return out.reshape(a.shape)


def ew_sub(a, b):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, y = b.reshape(-1), o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = x[i] - y[i]
    return out.reshape(a.shape)


def ew_mul(a, b):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, y = b.reshape(-1), o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = x[i] * y[i]
    return out.reshape(a.shape)


def add_rowvec(x, v):
    cdef double[:, ::1] xv = x
    cdef double[::1] vv = v
    out = np.empty((xv.shape[0], xv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(xv.shape[0]):
        for j in range(xv.shape[1]):
            o[i, j] = xv[i, j] + vv[j]
    return out


def mul_rowvec(x, v):
    cdef double[:, ::1] xv = x
    cdef double[::1] vv = v
    out = np.empty((xv.shape[0], xv.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(xv.shape[0]):
        for j in range(xv.shape[1]):
            o[i, j] = xv[i, j] * vv[j]
    return out


def scal_add(a, double s):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = x[i] + s
    return out.reshape(a.shape)


def scal_mul(a, double s):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = x[i] * s
    return out.reshape(a.shape)


def tanh_fwd(a):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = c_tanh(x[i])
    return out.reshape(a.shape)


def tanh_bwd(y, gy):
    flat = y.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] yv = flat, gv = gy.reshape(-1), o = out
    cdef Py_ssize_t i, n = yv.shape[0]
    for i in range(n):
        o[i] = gv[i] * (1.0 - yv[i] * yv[i])
    return out.reshape(y.shape)


def sigmoid_fwd(a):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, o = out
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double e
    for i in range(n):
        if x[i] >= 0:
            o[i] = 1.0 / (1.0 + c_exp(-x[i]))
        else:
            e = c_exp(x[i])
            o[i] = e / (1.0 + e)
    return out.reshape(a.shape)


def sigmoid_bwd(y, gy):
    flat = y.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] yv = flat, gv = gy.reshape(-1), o = out
    cdef Py_ssize_t i, n = yv.shape[0]
    for i in range(n):
        o[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return out.reshape(y.shape)


def exp_fwd(a):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = c_exp(x[i])
    return out.reshape(a.shape)


def log_fwd(a):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = c_log(x[i])
    return out.reshape(a.shape)


def clamp_fwd(a, double lo, double hi):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = lo if x[i] < lo else (hi if x[i] > hi else x[i])
    return out.reshape(a.shape)


def clamp_bwd(a, gy, double lo, double hi):
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    cdef double[::1] x = flat, g = gy.reshape(-1), o = out
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        o[i] = g[i] if (lo < x[i] < hi) else 0.0
    return out.reshape(a.shape)


def softmax_rows(x):
    cdef double[:, ::1] xv = x
    cdef Py_ssize_t m = xv.shape[0], n = xv.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(m):
        mx = xv[i, 0]
        for j in range(1, n):
            if xv[i, j] > mx:
                mx = xv[i, j]
        s = 0.0
        for j in range(n):
            o[i, j] = c_exp(xv[i, j] - mx)
            s += o[i, j]
        for j in range(n):
            o[i, j] /= s
    return out


def softmax_rows_bwd(y, gy):
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] gv = gy
    cdef Py_ssize_t m = yv.shape[0], n = yv.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += gv[i, j] * yv[i, j]
        for j in range(n):
            o[i, j] = yv[i, j] * (gv[i, j] - dot)
    return out


def layernorm_rows(x, double eps):
    cdef double[:, ::1] xv = x
    cdef Py_ssize_t m = xv.shape[0], n = xv.shape[1]
    y = np.empty((m, n), dtype=np.float64)
    rstd = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] yv = y
    cdef double[::1] rv = rstd
    cdef Py_ssize_t i, j
    cdef double mu, var, d
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += xv[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = xv[i, j] - mu
            var += d * d
        var /= n
        rv[i] = 1.0 / c_sqrt(var + eps)
        for j in range(n):
            yv[i, j] = (xv[i, j] - mu) * rv[i]
    return y, rstd


def layernorm_rows_bwd(y, rstd, gy):
    cdef double[:, ::1] yv = y
    cdef double[::1] rv = rstd
    cdef double[:, ::1] gv = gy
    cdef Py_ssize_t m = yv.shape[0], n = yv.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double mg, mgy
    for i in range(m):
        mg = 0.0
        mgy = 0.0
        for j in range(n):
            mg += gv[i, j]
            mgy += gv[i, j] * yv[i, j]
        mg /= n
        mgy /= n
        for j in range(n):
            o[i, j] = rv[i] * (gv[i, j] - mg - yv[i, j] * mgy)
    return out


def ce_rows(logits, targets, long long ignore_id):
    cdef double[:, ::1] xv = logits
    cdef cnp.int64_t[::1] tv = targets
    cdef Py_ssize_t m = xv.shape[0], n = xv.shape[1]
    losses = np.zeros(m, dtype=np.float64)
    probs = np.empty((m, n), dtype=np.float64)
    cdef double[::1] lv = losses
    cdef double[:, ::1] pv = probs
    cdef Py_ssize_t i, j, t
    cdef double mx, s
    for i in range(m):
        mx = xv[i, 0]
        for j in range(1, n):
            if xv[i, j] > mx:
                mx = xv[i, j]
        s = 0.0
        for j in range(n):
            pv[i, j] = c_exp(xv[i, j] - mx)
            s += pv[i, j]
        for j in range(n):
            pv[i, j] /= s
        if tv[i] != ignore_id:
            t = <Py_ssize_t> tv[i]
            lv[i] = -(xv[i, t] - mx - c_log(s))
    return losses, probs


def ce_rows_bwd(probs, targets, glosses, long long ignore_id):
    cdef double[:, ::1] pv = probs
    cdef cnp.int64_t[::1] tv = targets
    cdef double[::1] gv = glosses
    cdef Py_ssize_t m = pv.shape[0], n = pv.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, t
    for i in range(m):
        if tv[i] == ignore_id:
            for j in range(n):
                o[i, j] = 0.0
        else:
            t = <Py_ssize_t> tv[i]
            for j in range(n):
                o[i, j] = pv[i, j] * gv[i]
            o[i, t] -= gv[i]
    return out


def gather_rows(table, ids):
    cdef double[:, ::1] tv = table
    cdef cnp.int64_t[::1] iv = ids
    cdef Py_ssize_t m = iv.shape[0], d = tv.shape[1]
    out = np.empty((m, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, r
    for i in range(m):
        r = <Py_ssize_t> iv[i]
        for j in range(d):
            o[i, j] = tv[r, j]
    return out


def scatter_add_rows(gtable, ids, gy):
    cdef double[:, ::1] tv = gtable
    cdef cnp.int64_t[::1] iv = ids
    cdef double[:, ::1] gv = gy
    cdef Py_ssize_t m = iv.shape[0], d = tv.shape[1]
    cdef Py_ssize_t i, j, r
    for i in range(m):
        r = <Py_ssize_t> iv[i]
        for j in range(d):
            tv[r, j] += gv[i, j]


def masked_fill(x, blocked, double value):
    flat = x.reshape(-1)
    mflat = blocked.reshape(-1).view(np.uint8)
    out = np.empty_like(flat)
    cdef double[::1] xv = flat, o = out
    cdef const unsigned char[::1] mv = mflat
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        o[i] = value if mv[i] else xv[i]
    return out.reshape(x.shape)


def sum_all(x):
    flat = x.reshape(-1)
    cdef double[::1] xv = flat
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double s = 0.0
    for i in range(n):
        s += xv[i]
    return s


def sum_rows(x):
    cdef double[:, ::1] xv = x
    cdef Py_ssize_t m = xv.shape[0], n = xv.shape[1]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += xv[i, j]
        o[i] = s
    return out


def sum_cols(x):
    cdef double[:, ::1] xv = x
    cdef Py_ssize_t m = xv.shape[0], n = xv.shape[1]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(n):
            o[j] += xv[i, j]
    return out


def adam_update(p, g, m, v, double lr, double beta1, double beta2,
                double eps, long long t):
    # flat views alias the originals (C-contiguous), so updates stick
    cdef double[::1] pv = p.reshape(-1)
    cdef double[::1] gv = g.reshape(-1)
    cdef double[::1] mv = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double mhat, vhat
    for i in range(n):
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i]
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * gv[i] * gv[i]
        mhat = mv[i] / bc1
        vhat = vv[i] / bc2
        pv[i] -= lr * mhat / (c_sqrt(vhat) + eps)
