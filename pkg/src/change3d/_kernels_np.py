"""Numpy implementations of the convolution hot kernels.

This is the fallback backend: pure vectorized numpy, no compiled code.
``change3d._core`` (Cython) implements the same surface with tight typed
loops; ``change3d.backend`` picks one at import time.  All functions take
and return C-contiguous float32 or float64 arrays, never autodiff tensors.

Layout conventions
------------------
* 3D activations: (N, C, T, H, W); 2D activations: (N, C, H, W).
* im2col output: (N, C*prod(kernel), prod(out_extents)) with the kernel
  offsets varying fastest within a channel block.
* depthwise weights: (C, kt, kh, kw).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col3d(x, kernel, stride, pad):
    kt, kh, kw = kernel
    st, sh, sw = stride
    pt, ph, pw = pad
    n, c = x.shape[:2]
    if pt or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    v = sliding_window_view(x, (kt, kh, kw), axis=(2, 3, 4))
    v = v[:, :, ::st, ::sh, ::sw]
    to, ho, wo = v.shape[2:5]
    # (N, C, To, Ho, Wo, kt, kh, kw) -> (N, C*kt*kh*kw, To*Ho*Wo), one copy
    v = v.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(v).reshape(n, c * kt * kh * kw, to * ho * wo)


def col2im3d(cols, xshape, kernel, stride, pad):
    """Adjoint of im2col3d: scatter-add columns back onto the input grid."""
    kt, kh, kw = kernel
    st, sh, sw = stride
    pt, ph, pw = pad
    n, c, t, h, w = xshape
    to = out_extent(t, kt, st, pt)
    ho = out_extent(h, kh, sh, ph)
    wo = out_extent(w, kw, sw, pw)
    cols = cols.reshape(n, c, kt, kh, kw, to, ho, wo)
    buf = np.zeros((n, c, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for dt in range(kt):
        ts = slice(dt, dt + (to - 1) * st + 1, st)
        for dh in range(kh):
            hs = slice(dh, dh + (ho - 1) * sh + 1, sh)
            for dw in range(kw):
                ws = slice(dw, dw + (wo - 1) * sw + 1, sw)
                buf[:, :, ts, hs, ws] += cols[:, :, dt, dh, dw]
    return np.ascontiguousarray(buf[:, :, pt:pt + t, ph:ph + h, pw:pw + w])


def im2col2d(x, kernel, stride, pad):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    n, c = x.shape[:2]
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = v.shape[2:4]
    v = v.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(v).reshape(n, c * kh * kw, ho * wo)


def col2im2d(cols, xshape, kernel, stride, pad):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    n, c, h, w = xshape
    ho = out_extent(h, kh, sh, ph)
    wo = out_extent(w, kw, sw, pw)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    buf = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for dh in range(kh):
        hs = slice(dh, dh + (ho - 1) * sh + 1, sh)
        for dw in range(kw):
            ws = slice(dw, dw + (wo - 1) * sw + 1, sw)
            buf[:, :, hs, ws] += cols[:, :, dh, dw]
    return np.ascontiguousarray(buf[:, :, ph:ph + h, pw:pw + w])


def dwconv3d(x, w, stride, pad):
    """Depthwise 3D convolution, weight (C, kt, kh, kw), one filter per channel."""
    kt, kh, kw = w.shape[1:]
    st, sh, sw = stride
    pt, ph, pw = pad
    n, c, t, h, wd = x.shape
    to = out_extent(t, kt, st, pt)
    ho = out_extent(h, kh, sh, ph)
    wo = out_extent(wd, kw, sw, pw)
    if pt or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    out = np.zeros((n, c, to, ho, wo), dtype=x.dtype)
    for dt in range(kt):
        ts = slice(dt, dt + (to - 1) * st + 1, st)
        for dh in range(kh):
            hs = slice(dh, dh + (ho - 1) * sh + 1, sh)
            for dw in range(kw):
                ws = slice(dw, dw + (wo - 1) * sw + 1, sw)
                out += w[:, dt, dh, dw][None, :, None, None, None] * x[:, :, ts, hs, ws]
    return out


def dwconv3d_grad_input(gout, w, xshape, stride, pad):
    kt, kh, kw = w.shape[1:]
    st, sh, sw = stride
    pt, ph, pw = pad
    n, c, t, h, wd = xshape
    to, ho, wo = gout.shape[2:]
    buf = np.zeros((n, c, t + 2 * pt, h + 2 * ph, wd + 2 * pw), dtype=gout.dtype)
    for dt in range(kt):
        ts = slice(dt, dt + (to - 1) * st + 1, st)
        for dh in range(kh):
            hs = slice(dh, dh + (ho - 1) * sh + 1, sh)
            for dw in range(kw):
                ws = slice(dw, dw + (wo - 1) * sw + 1, sw)
                buf[:, :, ts, hs, ws] += w[:, dt, dh, dw][None, :, None, None, None] * gout
    return np.ascontiguousarray(buf[:, :, pt:pt + t, ph:ph + h, pw:pw + wd])


def dwconv3d_grad_weight(x, gout, kernel, stride, pad):
    kt, kh, kw = kernel
    st, sh, sw = stride
    pt, ph, pw = pad
    c = x.shape[1]
    to, ho, wo = gout.shape[2:]
    if pt or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    gw = np.zeros((c, kt, kh, kw), dtype=x.dtype)
    for dt in range(kt):
        ts = slice(dt, dt + (to - 1) * st + 1, st)
        for dh in range(kh):
            hs = slice(dh, dh + (ho - 1) * sh + 1, sh)
            for dw in range(kw):
                ws = slice(dw, dw + (wo - 1) * sw + 1, sw)
                gw[:, dt, dh, dw] = np.einsum(
                    "ncthw,ncthw->c", gout, x[:, :, ts, hs, ws], optimize=True
                )
    return gw
