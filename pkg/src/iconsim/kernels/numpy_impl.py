"""Pure-numpy kernels for the convolution and pooling hot paths.

These are the fallback implementations used when numba is unavailable or
when ``ICONSIM_BACKEND=numpy`` is set. Convolutions go through strided
patch views plus ``tensordot`` so the heavy lifting stays inside BLAS.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

BACKEND_NAME = "numpy"


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _patch_view(xp, k, stride):
    """Strided [N,C,Ho,Wo,k,k] window view over a padded input."""
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d_forward(x, w, b, stride, padding):
    """Cross-correlation of x[N,C,H,W] with w[Cout,C,k,k] plus bias."""
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    patches = _patch_view(xp, k, stride)
    # [N,Ho,Wo,Cout] <- contract over (C, ki, kj)
    out = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out.astype(x.dtype, copy=False))


def conv2d_backward(x, w, stride, padding, gout):
    """Gradients (dx, dw, db) of conv2d_forward wrt input, weight, bias."""
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    patches = _patch_view(xp, k, stride)
    ho, wo = gout.shape[2], gout.shape[3]

    db = gout.sum(axis=(0, 2, 3))
    # [Cout,C,k,k] <- contract gout over (N, Ho, Wo)
    dw = np.tensordot(gout, patches, axes=([0, 2, 3], [0, 2, 3]))

    dxp = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            # contribution of kernel tap (ki,kj); slices never overlap for
            # a fixed tap, so += on the strided slice is safe
            contrib = np.tensordot(gout, w[:, :, ki, kj], axes=([1], [0]))
            dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, padding : padding + h, padding : padding + wd]
    return (
        np.ascontiguousarray(dx.astype(x.dtype, copy=False)),
        np.ascontiguousarray(dw.astype(w.dtype, copy=False)),
        db.astype(w.dtype, copy=False),
    )


def maxpool2d_forward(x, window, stride):
    """Per-window max over x[N,C,H,W]; also returns flat argmax indices.

    Indices are linear positions into each [H,W] plane; ties resolve to the
    lowest linear index (row-major within the window).
    """
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    patches = _patch_view(x, window, stride)
    flat = patches.reshape(n, c, ho, wo, window * window)
    local = flat.argmax(axis=4)
    out = np.take_along_axis(flat, local[..., None], axis=4)[..., 0]

    ih = (np.arange(ho) * stride)[None, None, :, None] + local // window
    iw = (np.arange(wo) * stride)[None, None, None, :] + local % window
    argmax = (ih * w + iw).astype(np.int64)
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward(x_shape, argmax, gout):
    """Scatter gout back to argmax positions of the pooled input."""
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h * w), dtype=gout.dtype)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ni, ci, argmax), gout)
    return dx.reshape(n, c, h, w)
