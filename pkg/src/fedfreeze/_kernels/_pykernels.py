"""Numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` that performs the same
floating point operations in the same order, so both backends produce
bit-identical results.  Arrays are NHWC and C-contiguous.
"""
import numpy as np


def im2col(x, kh, kw, stride):
    """Unfold ``x`` (N, H, W, C) into patches (N, OH, OW, kh*kw*C).

    The patch axis is ordered (row offset, column offset, channel), which
    matches a kernel of shape (kh, kw, C, F) reshaped to (kh*kw*C, F).
    Padding must already be applied.
    """
    n, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((n, oh, ow, kh * kw * c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            k = (i * kw + j) * c
            cols[:, :, :, k:k + c] = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols


def col2im(cols, x_shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back into (N, H, W, C)."""
    n, h, w, c = x_shape
    _, oh, ow, _ = cols.shape
    dx = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            k = (i * kw + j) * c
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, k:k + c]
    return dx


def maxpool_forward(x, pool, stride):
    """Max pooling over (pool, pool) windows.

    Returns the pooled output and, per output cell, the flat window offset
    of the first maximum in row-major scan order.
    """
    n, h, w, c = x.shape
    oh = (h - pool) // stride + 1
    ow = (w - pool) // stride + 1
    out = x[:, 0:stride * oh:stride, 0:stride * ow:stride, :].copy()
    arg = np.zeros((n, oh, ow, c), dtype=np.int32)
    for i in range(pool):
        for j in range(pool):
            if i == 0 and j == 0:
                continue
            win = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
            better = win > out
            out[better] = win[better]
            arg[better] = i * pool + j
    return out, arg


def maxpool_backward(dout, arg, x_shape, pool, stride):
    n, oh, ow, c = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(pool):
        for j in range(pool):
            hit = arg == i * pool + j
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += np.where(hit, dout, 0)
    return dx


def adam_update(param, grad, m, v, lr_t, beta1, beta2, eps):
    """In-place Adam step with bias correction folded into ``lr_t``."""
    dt = param.dtype.type
    m *= dt(beta1)
    m += dt(1.0 - beta1) * grad
    v *= dt(beta2)
    v += dt(1.0 - beta2) * (grad * grad)
    denom = np.sqrt(v)
    denom += dt(eps)
    param -= dt(lr_t) * m / denom
