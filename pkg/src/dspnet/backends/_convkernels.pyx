# Direct convolution kernels. Parallelism is over independent output slabs
# (batch for forward/input-grad, output channel for weight-grad), so the
# per-cell summation order is fixed regardless of thread count.

import numpy as np

cimport cython
from cython.parallel cimport prange

NAME = "cython"

ctypedef fused floating:
    float
    double


def conv_out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    xp_arr = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dtype)
    out_arr = np.zeros((n, o, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = xp_arr
    cdef floating[:, :, :, ::1] out = out_arr
    xp[:, :, pad:pad + h, pad:pad + wd] = x

    cdef Py_ssize_t ni, oi, ci, i, j, oh, ow, ih
    cdef floating wv
    for ni in prange(n, nogil=True, schedule='static'):
        for oi in range(o):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oi, ci, i, j]
                        if stride == 1:
                            for oh in range(ho):
                                ih = oh + i
                                for ow in range(wo):
                                    out[ni, oi, oh, ow] = out[ni, oi, oh, ow] + wv * xp[ni, ci, ih, ow + j]
                        else:
                            for oh in range(ho):
                                ih = oh * stride + i
                                for ow in range(wo):
                                    out[ni, oi, oh, ow] = out[ni, oi, oh, ow] + wv * xp[ni, ci, ih, ow * stride + j]
    return out_arr


def conv2d_backward_input(floating[:, :, :, ::1] w, floating[:, :, :, ::1] gout,
                          x_shape, int stride, int pad):
    cdef Py_ssize_t n = gout.shape[0], o = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t h = x_shape[2], wd = x_shape[3]
    dtype = np.float32 if floating is float else np.float64
    dxp_arr = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dtype)
    cdef floating[:, :, :, ::1] dxp = dxp_arr

    cdef Py_ssize_t ni, oi, ci, i, j, oh, ow, ih
    cdef floating wv
    for ni in prange(n, nogil=True, schedule='static'):
        for oi in range(o):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oi, ci, i, j]
                        if stride == 1:
                            for oh in range(ho):
                                ih = oh + i
                                for ow in range(wo):
                                    dxp[ni, ci, ih, ow + j] = dxp[ni, ci, ih, ow + j] + wv * gout[ni, oi, oh, ow]
                        else:
                            for oh in range(ho):
                                ih = oh * stride + i
                                for ow in range(wo):
                                    dxp[ni, ci, ih, ow * stride + j] = dxp[ni, ci, ih, ow * stride + j] + wv * gout[ni, oi, oh, ow]
    if pad == 0:
        return dxp_arr
    return np.ascontiguousarray(dxp_arr[:, :, pad:pad + h, pad:pad + wd])


def conv2d_backward_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] gout,
                           w_shape, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t kh = w_shape[2], kw = w_shape[3]
    dtype = np.float32 if floating is float else np.float64
    xp_arr = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dtype)
    dw_arr = np.zeros(tuple(w_shape), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = xp_arr
    cdef floating[:, :, :, ::1] dw = dw_arr
    xp[:, :, pad:pad + h, pad:pad + wd] = x

    cdef Py_ssize_t ni, oi, ci, i, j, oh, ow
    cdef floating acc
    for oi in prange(o, nogil=True, schedule='static'):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    acc = 0
                    for ni in range(n):
                        for oh in range(ho):
                            for ow in range(wo):
                                acc = acc + gout[ni, oi, oh, ow] * xp[ni, ci, oh * stride + i, ow * stride + j]
                    dw[oi, ci, i, j] = acc
    return dw_arr
