"""Numba-compiled kernels for the convolution and pooling hot paths.

Inputs are zero-padded up front so the inner loops carry no bounds
checks; the stride-1 branches keep unit-stride indexing so LLVM can
vectorize them. Every prange iteration writes a disjoint output slice
(per batch item or per output channel), so parallel execution is
bit-reproducible run to run.
"""

import numpy as np
from numba import njit, prange

BACKEND_NAME = "numba"


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_forward_padded(xp, w, b, stride, ho, wo):
    n = xp.shape[0]
    c = xp.shape[1]
    cout, _, kh, kw = w.shape
    out = np.empty((n, cout, ho, wo), dtype=xp.dtype)
    for ni in prange(n):
        for co in range(cout):
            plane = out[ni, co]
            for i in range(ho):
                for j in range(wo):
                    plane[i, j] = b[co]
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[co, ci, ki, kj]
                        if stride == 1:
                            for i in range(ho):
                                xrow = xp[ni, ci, i + ki]
                                orow = plane[i]
                                for j in range(wo):
                                    orow[j] += wv * xrow[kj + j]
                        else:
                            for i in range(ho):
                                xrow = xp[ni, ci, i * stride + ki]
                                orow = plane[i]
                                for j in range(wo):
                                    orow[j] += wv * xrow[kj + j * stride]
    return out


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_backward_dx_padded(w, gout, stride, hp, wp):
    n, cout, ho, wo = gout.shape
    c = w.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    dxp = np.zeros((n, c, hp, wp), dtype=gout.dtype)
    for ni in prange(n):
        for co in range(cout):
            for ci in range(c):
                for ki in range(kh):
                    if stride == 1:
                        for i in range(ho):
                            drow = dxp[ni, ci, i + ki]
                            grow = gout[ni, co, i]
                            for kj in range(kw):
                                wv = w[co, ci, ki, kj]
                                for j in range(wo):
                                    drow[kj + j] += wv * grow[j]
                    else:
                        for i in range(ho):
                            drow = dxp[ni, ci, i * stride + ki]
                            grow = gout[ni, co, i]
                            for kj in range(kw):
                                wv = w[co, ci, ki, kj]
                                for j in range(wo):
                                    drow[kj + j * stride] += wv * grow[j]
    return dxp


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_backward_dw_padded(xp, gout, stride, kh, kw):
    n, cout, ho, wo = gout.shape
    c = xp.shape[1]
    dw = np.zeros((cout, c, kh, kw), dtype=xp.dtype)
    db = np.zeros(cout, dtype=xp.dtype)
    zero = xp.dtype.type(0)
    for co in prange(cout):
        acc_b = zero
        for ni in range(n):
            for i in range(ho):
                grow = gout[ni, co, i]
                for j in range(wo):
                    acc_b += grow[j]
        db[co] = acc_b
        taps = np.zeros(kw, dtype=xp.dtype)
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    taps[kj] = zero
                if stride == 1:
                    for ni in range(n):
                        for i in range(ho):
                            xrow = xp[ni, ci, i + ki]
                            grow = gout[ni, co, i]
                            for kj in range(kw):
                                acc = zero
                                for j in range(wo):
                                    acc += grow[j] * xrow[kj + j]
                                taps[kj] += acc
                else:
                    for ni in range(n):
                        for i in range(ho):
                            xrow = xp[ni, ci, i * stride + ki]
                            grow = gout[ni, co, i]
                            for kj in range(kw):
                                acc = zero
                                for j in range(wo):
                                    acc += grow[j] * xrow[kj + j * stride]
                                taps[kj] += acc
                for kj in range(kw):
                    dw[co, ci, ki, kj] = taps[kj]
    return dw, db


@njit(parallel=True, cache=True)
def _maxpool2d_forward(x, window, stride):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    argmax = np.empty((n, c, ho, wo), dtype=np.int64)
    for ni in prange(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[ni, ci, i * stride, j * stride]
                    bi = i * stride * w + j * stride
                    for ki in range(window):
                        ih = i * stride + ki
                        for kj in range(window):
                            jw = j * stride + kj
                            v = x[ni, ci, ih, jw]
                            if v > best:
                                best = v
                                bi = ih * w + jw
                    out[ni, ci, i, j] = best
                    argmax[ni, ci, i, j] = bi
    return out, argmax


@njit(parallel=True, cache=True)
def _maxpool2d_backward(argmax, gout, h, w):
    n, c, ho, wo = gout.shape
    dx = np.zeros((n, c, h * w), dtype=gout.dtype)
    for ni in prange(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    dx[ni, ci, argmax[ni, ci, i, j]] += gout[ni, ci, i, j]
    return dx.reshape(n, c, h, w)


def conv2d_forward(x, w, b, stride, padding):
    xp = _pad(x, padding)
    k = w.shape[2]
    ho = (x.shape[2] + 2 * padding - k) // stride + 1
    wo = (x.shape[3] + 2 * padding - k) // stride + 1
    return _conv2d_forward_padded(xp, w, b, stride, ho, wo)


def conv2d_backward(x, w, stride, padding, gout):
    xp = _pad(x, padding)
    h, wd = x.shape[2], x.shape[3]
    dxp = _conv2d_backward_dx_padded(w, gout, stride, xp.shape[2], xp.shape[3])
    if padding:
        dx = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + wd])
    else:
        dx = dxp
    dw, db = _conv2d_backward_dw_padded(xp, gout, stride, w.shape[2], w.shape[3])
    return dx, dw, db


def maxpool2d_forward(x, window, stride):
    return _maxpool2d_forward(x, window, stride)


def maxpool2d_backward(x_shape, argmax, gout):
    return _maxpool2d_backward(argmax, gout, x_shape[2], x_shape[3])
