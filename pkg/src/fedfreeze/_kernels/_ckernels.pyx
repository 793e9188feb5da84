# cython: language_level=3
"""Compiled twins of the kernels in ``_pykernels``.

Loop orders mirror the numpy versions so accumulations happen in the same
sequence; with FMA contraction disabled the outputs are bit-identical.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, sqrtf

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, oh, ow, kh * kw * c), dtype=dtype)
    cdef floating[:, :, :, ::1] cols = out
    cdef Py_ssize_t b, p, q, i, j, ch, k
    with nogil:
        for b in range(n):
            for p in range(oh):
                for q in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            k = (i * kw + j) * c
                            for ch in range(c):
                                cols[b, p, q, k + ch] = x[b, p * stride + i, q * stride + j, ch]
    return out


def col2im(floating[:, :, :, ::1] cols, tuple x_shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[3]
    cdef Py_ssize_t oh = cols.shape[1], ow = cols.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros(x_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, p, q, i, j, ch, k
    with nogil:
        for i in range(kh):
            for j in range(kw):
                k = (i * kw + j) * c
                for b in range(n):
                    for p in range(oh):
                        for q in range(ow):
                            for ch in range(c):
                                dx[b, p * stride + i, q * stride + j, ch] += cols[b, p, q, k + ch]
    return out


def maxpool_forward(floating[:, :, :, ::1] x, int pool, int stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h - pool) // stride + 1
    cdef Py_ssize_t ow = (w - pool) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, oh, ow, c), dtype=dtype)
    arg_arr = np.zeros((n, oh, ow, c), dtype=np.int32)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef int[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, p, q, i, j, ch
    cdef floating best, val
    cdef int best_k
    with nogil:
        for b in range(n):
            for p in range(oh):
                for q in range(ow):
                    for ch in range(c):
                        best = x[b, p * stride, q * stride, ch]
                        best_k = 0
                        for i in range(pool):
                            for j in range(pool):
                                val = x[b, p * stride + i, q * stride + j, ch]
                                if val > best:
                                    best = val
                                    best_k = i * pool + j
                        out[b, p, q, ch] = best
                        arg[b, p, q, ch] = best_k
    return out_arr, arg_arr


def maxpool_backward(floating[:, :, :, ::1] dout, int[:, :, :, ::1] arg, tuple x_shape,
                     int pool, int stride):
    cdef Py_ssize_t n = dout.shape[0], oh = dout.shape[1], ow = dout.shape[2], c = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros(x_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, p, q, i, j, ch
    with nogil:
        for i in range(pool):
            for j in range(pool):
                for b in range(n):
                    for p in range(oh):
                        for q in range(ow):
                            for ch in range(c):
                                if arg[b, p, q, ch] == i * pool + j:
                                    dx[b, p * stride + i, q * stride + j, ch] += dout[b, p, q, ch]
    return out


def adam_update(param, grad, m, v, double lr_t, double beta1, double beta2, double eps):
    if param.dtype == np.float32:
        _adam_f32(param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                  lr_t, beta1, beta2, eps)
    else:
        _adam_f64(param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                  lr_t, beta1, beta2, eps)


cdef void _adam_f32(float[::1] p, float[::1] g, float[::1] m, float[::1] v,
                    double lr_t, double beta1, double beta2, double eps) noexcept:
    cdef float b1 = <float>beta1, c1 = <float>(1.0 - beta1)
    cdef float b2 = <float>beta2, c2 = <float>(1.0 - beta2)
    cdef float lr = <float>lr_t, e = <float>eps
    cdef float gi, num, den
    cdef Py_ssize_t i
    with nogil:
        for i in range(p.shape[0]):
            gi = g[i]
            m[i] = b1 * m[i]
            m[i] = m[i] + c1 * gi
            v[i] = b2 * v[i]
            v[i] = v[i] + c2 * (gi * gi)
            num = lr * m[i]
            den = sqrtf(v[i]) + e
            p[i] = p[i] - num / den


cdef void _adam_f64(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                    double lr_t, double beta1, double beta2, double eps) noexcept:
    cdef double c1 = 1.0 - beta1, c2 = 1.0 - beta2
    cdef double gi, num, den
    cdef Py_ssize_t i
    with nogil:
        for i in range(p.shape[0]):
            gi = g[i]
            m[i] = beta1 * m[i]
            m[i] = m[i] + c1 * gi
            v[i] = beta2 * v[i]
            v[i] = v[i] + c2 * (gi * gi)
            num = lr_t * m[i]
            den = sqrt(v[i]) + eps
            p[i] = p[i] - num / den
