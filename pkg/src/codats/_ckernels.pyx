# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution gather and fused batch-norm kernels.

Drop-in replacement for ``_kernels_py``. GEMMs still go through numpy/BLAS;
what is compiled is the padded column gather (no padded copy, one memcpy per
kernel tap) and single-loop batch-norm passes with float64 accumulators.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt
from libc.string cimport memcpy, memset

cnp.import_array()

NAME = "cython"


cdef void _gather(floating[:, :, ::1] x, floating[:, ::1] cols, Py_ssize_t k,
                  Py_ssize_t left) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t b, t, j, s, row
    cdef size_t run = C * sizeof(floating)
    for b in range(B):
        for t in range(H):
            row = b * H + t
            for j in range(k):
                s = t + j - left
                if 0 <= s < H:
                    memcpy(&cols[row, j * C], &x[b, s, 0], run)
                else:
                    memset(&cols[row, j * C], 0, run)


def im2col(x, Py_ssize_t k, Py_ssize_t left):
    """(B, H, C) -> (B*H, k*C) with column j*C + c holding x[b, t+j-left, c]."""
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], C = x.shape[2]
    cols = np.empty((B * H, k * C), dtype=x.dtype)
    if x.dtype == np.float32:
        _gather[float](x, cols, k, left)
    elif x.dtype == np.float64:
        _gather[double](x, cols, k, left)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def conv1d_forward(x, w):
    cdef Py_ssize_t k = w.shape[0], cin = w.shape[1], f = w.shape[2]
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1]
    cols = im2col(x, k, (k - 1) // 2)
    out = (cols @ w.reshape(k * cin, f)).reshape(B, H, f)
    return out, cols


def conv1d_backward(g, x_shape, w, cols, need_x=True):
    cdef Py_ssize_t k = w.shape[0], cin = w.shape[1], f = w.shape[2]
    cdef Py_ssize_t B = x_shape[0], H = x_shape[1]
    cdef Py_ssize_t left = (k - 1) // 2
    g = np.ascontiguousarray(g)
    gw = (cols.T @ g.reshape(B * H, f)).reshape(k, cin, f)
    if not need_x:
        return None, gw
    wflip = np.ascontiguousarray(w[::-1].transpose(0, 2, 1)).reshape(k * f, cin)
    gx = (im2col(g, k, k - 1 - left) @ wflip).reshape(B, H, cin)
    return gx, gw


cdef int _bn_forward(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps,
                     floating[:, ::1] y, floating[:, ::1] xhat, floating[::1] inv_std,
                     floating[::1] mean_out, floating[::1] var_out,
                     double[::1] acc, double[::1] acc2) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], C = x.shape[1], i, c
    cdef double d, m, s
    for c in range(C):
        acc[c] = 0.0
        acc2[c] = 0.0
    for i in range(n):
        for c in range(C):
            acc[c] += x[i, c]
    for c in range(C):
        acc[c] /= n
    for i in range(n):
        for c in range(C):
            d = x[i, c] - acc[c]
            acc2[c] += d * d
    for c in range(C):
        acc2[c] /= n
        if acc2[c] + eps <= 0:
            return -1
        mean_out[c] = <floating>acc[c]
        var_out[c] = <floating>acc2[c]
        inv_std[c] = <floating>(1.0 / sqrt(acc2[c] + eps))
    for i in range(n):
        for c in range(C):
            s = (x[i, c] - acc[c]) * inv_std[c]
            xhat[i, c] = <floating>s
            y[i, c] = <floating>(s * gamma[c] + beta[c])
    return 0


def batchnorm_train_forward(x, gamma, beta, eps):
    x = np.ascontiguousarray(x)
    dt = x.dtype
    n, C = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(C, dt)
    mean = np.empty(C, dt)
    var = np.empty(C, dt)
    acc = np.empty(C, np.float64)
    acc2 = np.empty(C, np.float64)
    gamma = np.ascontiguousarray(gamma, dt)
    beta = np.ascontiguousarray(beta, dt)
    cdef int rc
    if dt == np.float32:
        rc = _bn_forward[float](x, gamma, beta, eps, y, xhat, inv_std, mean, var, acc, acc2)
    elif dt == np.float64:
        rc = _bn_forward[double](x, gamma, beta, eps, y, xhat, inv_std, mean, var, acc, acc2)
    else:
        raise TypeError(f"unsupported dtype {dt}")
    if rc != 0:
        raise FloatingPointError("batchnorm variance plus epsilon is not positive")
    return y, xhat, inv_std, mean, var


cdef void _bn_backward(floating[:, ::1] g, floating[:, ::1] xhat, floating[::1] inv_std,
                       floating[::1] gamma, floating[:, ::1] gx, floating[::1] ggamma,
                       floating[::1] gbeta, double[::1] sb, double[::1] sg) noexcept nogil:
    cdef Py_ssize_t n = g.shape[0], C = g.shape[1], i, c
    for c in range(C):
        sb[c] = 0.0
        sg[c] = 0.0
    for i in range(n):
        for c in range(C):
            sb[c] += g[i, c]
            sg[c] += g[i, c] * xhat[i, c]
    for c in range(C):
        gbeta[c] = <floating>sb[c]
        ggamma[c] = <floating>sg[c]
    cdef double scale
    for i in range(n):
        for c in range(C):
            scale = gamma[c] * inv_std[c] / n
            gx[i, c] = <floating>(scale * (n * g[i, c] - sb[c] - xhat[i, c] * sg[c]))


def batchnorm_train_backward(g, xhat, inv_std, gamma):
    g = np.ascontiguousarray(g)
    dt = g.dtype
    n, C = g.shape
    gx = np.empty_like(g)
    ggamma = np.empty(C, dt)
    gbeta = np.empty(C, dt)
    sb = np.empty(C, np.float64)
    sg = np.empty(C, np.float64)
    gamma = np.ascontiguousarray(gamma, dt)
    if dt == np.float32:
        _bn_backward[float](g, xhat, inv_std, gamma, gx, ggamma, gbeta, sb, sg)
    elif dt == np.float64:
        _bn_backward[double](g, xhat, inv_std, gamma, gx, ggamma, gbeta, sb, sg)
    else:
        raise TypeError(f"unsupported dtype {dt}")
    return gx, ggamma, gbeta
