"""Pure-numpy hot kernels.

Same signatures as the compiled ``_ckernels`` module; the backend is picked in
:mod:`codats.kernels`.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "numpy"


def _pads(k):
    left = (k - 1) // 2
    return left, k - 1 - left


def _im2col(x, k, left, right):
    # (B, H, C) -> (B*H, k*C); column index is j*C + c so each row is one
    # contiguous run of the padded input
    B, H, C = x.shape
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    s = xp.strides
    return as_strided(xp, (B, H, k * C), (s[0], s[1], s[2]), writeable=False).reshape(B * H, k * C)


def _colsum(a):
    # gemv is far faster than a.sum(axis=0) for narrow row-major arrays
    return np.ones(a.shape[0], a.dtype) @ a


def conv1d_forward(x, w):
    """Same-padded stride-1 cross-correlation.

    x is (B, H, Cin), w is (k, Cin, F). Returns the output and the column
    matrix needed by :func:`conv1d_backward`.
    """
    k, cin, f = w.shape
    B, H, _ = x.shape
    cols = _im2col(x, k, *_pads(k))
    out = (cols @ w.reshape(k * cin, f)).reshape(B, H, f)
    return out, cols


def conv1d_backward(g, x_shape, w, cols, need_x=True):
    k, cin, f = w.shape
    B, H, _ = x_shape
    gw = (cols.T @ g.reshape(B * H, f)).reshape(k, cin, f)
    if not need_x:
        return None, gw
    # input gradient: correlate g with the flipped, transposed kernel and the
    # padding sides swapped
    left, right = _pads(k)
    wflip = np.ascontiguousarray(w[::-1].transpose(0, 2, 1)).reshape(k * f, cin)
    gx = (_im2col(g, k, right, left) @ wflip).reshape(B, H, cin)
    return gx, gw


def batchnorm_train_forward(x, gamma, beta, eps):
    """Normalize (N, C) rows with population batch statistics.

    Returns (y, xhat, inv_std, mean, var).
    """
    n = x.shape[0]
    mean = _colsum(x) / n
    xc = x - mean
    var = _colsum(xc * xc) / n
    denom = var + eps
    if np.any(denom <= 0):
        raise FloatingPointError("batchnorm variance plus epsilon is not positive")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = xc * inv_std
    y = xhat * gamma + beta
    return y, xhat, inv_std, mean, var


def batchnorm_train_backward(g, xhat, inv_std, gamma):
    n = g.shape[0]
    gbeta = _colsum(g)
    ggamma = _colsum(g * xhat)
    gx = (gamma * inv_std / n) * (n * g - gbeta - xhat * ggamma)
    return gx, ggamma, gbeta
