# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im gathers and depthwise 3D convolution.

Same surface as change3d._kernels_np; see that module for layout notes.
"""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def out_extent(Py_ssize_t size, Py_ssize_t kernel, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - kernel) // stride + 1


def im2col3d(real[:, :, :, :, ::1] x, kernel, stride, pad):
    cdef Py_ssize_t kt = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t st = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t pt = pad[0], ph = pad[1], pw = pad[2]
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], t = x.shape[2], h = x.shape[3], w = x.shape[4]
    cdef Py_ssize_t to = (t + 2 * pt - kt) // st + 1
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1
    cdef Py_ssize_t l = to * ho * wo

    out_arr = np.zeros((n, c * kt * kh * kw, l), dtype=np.asarray(x).dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, dt, dh, dw, it, ih, iw, tt, hh, ww, row, col
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for dt in range(kt):
                    for dh in range(kh):
                        for dw in range(kw):
                            row = ((ci * kt + dt) * kh + dh) * kw + dw
                            for it in range(to):
                                tt = it * st + dt - pt
                                if tt < 0 or tt >= t:
                                    continue
                                for ih in range(ho):
                                    hh = ih * sh + dh - ph
                                    if hh < 0 or hh >= h:
                                        continue
                                    col = (it * ho + ih) * wo
                                    for iw in range(wo):
                                        ww = iw * sw + dw - pw
                                        if ww < 0 or ww >= w:
                                            continue
                                        out[ni, row, col + iw] = x[ni, ci, tt, hh, ww]
    return out_arr


def col2im3d(real[:, :, ::1] cols, xshape, kernel, stride, pad):
    cdef Py_ssize_t kt = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t st = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t pt = pad[0], ph = pad[1], pw = pad[2]
    cdef Py_ssize_t n = xshape[0], c = xshape[1], t = xshape[2], h = xshape[3], w = xshape[4]
    cdef Py_ssize_t to = (t + 2 * pt - kt) // st + 1
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1

    out_arr = np.zeros((n, c, t, h, w), dtype=np.asarray(cols).dtype)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, dt, dh, dw, it, ih, iw, tt, hh, ww, row, col
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for dt in range(kt):
                    for dh in range(kh):
                        for dw in range(kw):
                            row = ((ci * kt + dt) * kh + dh) * kw + dw
                            for it in range(to):
                                tt = it * st + dt - pt
                                if tt < 0 or tt >= t:
                                    continue
                                for ih in range(ho):
                                    hh = ih * sh + dh - ph
                                    if hh < 0 or hh >= h:
                                        continue
                                    col = (it * ho + ih) * wo
                                    for iw in range(wo):
                                        ww = iw * sw + dw - pw
                                        if ww < 0 or ww >= w:
                                            continue
                                        out[ni, ci, tt, hh, ww] += cols[ni, row, col + iw]
    return out_arr


def im2col2d(real[:, :, :, ::1] x, kernel, stride, pad):
    cdef Py_ssize_t kh = kernel[0], kw = kernel[1]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = pad[0], pw = pad[1]
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1

    out_arr = np.zeros((n, c * kh * kw, ho * wo), dtype=np.asarray(x).dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, dh, dw, ih, iw, hh, ww, row, col
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for dh in range(kh):
                    for dw in range(kw):
                        row = (ci * kh + dh) * kw + dw
                        for ih in range(ho):
                            hh = ih * sh + dh - ph
                            if hh < 0 or hh >= h:
                                continue
                            col = ih * wo
                            for iw in range(wo):
                                ww = iw * sw + dw - pw
                                if ww < 0 or ww >= w:
                                    continue
                                out[ni, row, col + iw] = x[ni, ci, hh, ww]
    return out_arr


def col2im2d(real[:, :, ::1] cols, xshape, kernel, stride, pad):
    cdef Py_ssize_t kh = kernel[0], kw = kernel[1]
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t ph = pad[0], pw = pad[1]
    cdef Py_ssize_t n = xshape[0], c = xshape[1], h = xshape[2], w = xshape[3]
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (w + 2 * pw - kw) // sw + 1

    out_arr = np.zeros((n, c, h, w), dtype=np.asarray(cols).dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, dh, dw, ih, iw, hh, ww, row, col
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for dh in range(kh):
                    for dw in range(kw):
                        row = (ci * kh + dh) * kw + dw
                        for ih in range(ho):
                            hh = ih * sh + dh - ph
                            if hh < 0 or hh >= h:
                                continue
                            col = ih * wo
                            for iw in range(wo):
                                ww = iw * sw + dw - pw
                                if ww < 0 or ww >= w:
                                    continue
                                out[ni, ci, hh, ww] += cols[ni, row, col + iw]
    return out_arr


def dwconv3d(real[:, :, :, :, ::1] x, real[:, :, :, ::1] w, stride, pad):
    cdef Py_ssize_t kt = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t st = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t pt = pad[0], ph = pad[1], pw = pad[2]
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], t = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t to = (t + 2 * pt - kt) // st + 1
    cdef Py_ssize_t ho = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t wo = (wd + 2 * pw - kw) // sw + 1

    out_arr = np.zeros((n, c, to, ho, wo), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, dt, dh, dw, it, ih, iw, tt, hh, ww, lo, hi
    cdef real wv
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for dt in range(kt):
                    for dh in range(kh):
                        for dw in range(kw):
                            wv = w[ci, dt, dh, dw]
                            # valid iw range: 0 <= iw*sw + dw - pw < wd
                            lo = (pw - dw + sw - 1) // sw
                            if lo < 0:
                                lo = 0
                            hi = (wd - 1 - dw + pw) // sw + 1
                            if hi > wo:
                                hi = wo
                            for it in range(to):
                                tt = it * st + dt - pt
                                if tt < 0 or tt >= t:
                                    continue
                                for ih in range(ho):
                                    hh = ih * sh + dh - ph
                                    if hh < 0 or hh >= h:
                                        continue
                                    for iw in range(lo, hi):
                                        out[ni, ci, it, ih, iw] += wv * x[ni, ci, tt, hh, iw * sw + dw - pw]
    return out_arr


def dwconv3d_grad_input(real[:, :, :, :, ::1] gout, real[:, :, :, ::1] w, xshape, stride, pad):
    cdef Py_ssize_t kt = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t st = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t pt = pad[0], ph = pad[1], pw = pad[2]
    cdef Py_ssize_t n = xshape[0], c = xshape[1], t = xshape[2], h = xshape[3], wd = xshape[4]
    cdef Py_ssize_t to = gout.shape[2], ho = gout.shape[3], wo = gout.shape[4]

    out_arr = np.zeros((n, c, t, h, wd), dtype=np.asarray(gout).dtype)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, dt, dh, dw, it, ih, iw, tt, hh, lo, hi
    cdef real wv
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for dt in range(kt):
                    for dh in range(kh):
                        for dw in range(kw):
                            wv = w[ci, dt, dh, dw]
                            lo = (pw - dw + sw - 1) // sw
                            if lo < 0:
                                lo = 0
                            hi = (wd - 1 - dw + pw) // sw + 1
                            if hi > wo:
                                hi = wo
                            for it in range(to):
                                tt = it * st + dt - pt
                                if tt < 0 or tt >= t:
                                    continue
                                for ih in range(ho):
                                    hh = ih * sh + dh - ph
                                    if hh < 0 or hh >= h:
                                        continue
                                    for iw in range(lo, hi):
                                        out[ni, ci, tt, hh, iw * sw + dw - pw] += wv * gout[ni, ci, it, ih, iw]
    return out_arr


def dwconv3d_grad_weight(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] gout, kernel, stride, pad):
    cdef Py_ssize_t kt = kernel[0], kh = kernel[1], kw = kernel[2]
    cdef Py_ssize_t st = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t pt = pad[0], ph = pad[1], pw = pad[2]
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], t = x.shape[2], h = x.shape[3], wd = x.shape[4]
    cdef Py_ssize_t to = gout.shape[2], ho = gout.shape[3], wo = gout.shape[4]

    # accumulate in double regardless of input precision: each weight cell
    # sums N*To*Ho*Wo products
    gw_arr = np.zeros((c, kt, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t ni, ci, dt, dh, dw, it, ih, iw, tt, hh, lo, hi
    cdef double acc
    with nogil:
        for ci in range(c):
            for dt in range(kt):
                for dh in range(kh):
                    for dw in range(kw):
                        lo = (pw - dw + sw - 1) // sw
                        if lo < 0:
                            lo = 0
                        hi = (wd - 1 - dw + pw) // sw + 1
                        if hi > wo:
                            hi = wo
                        acc = 0.0
                        for ni in range(n):
                            for it in range(to):
                                tt = it * st + dt - pt
                                if tt < 0 or tt >= t:
                                    continue
                                for ih in range(ho):
                                    hh = ih * sh + dh - ph
                                    if hh < 0 or hh >= h:
                                        continue
                                    for iw in range(lo, hi):
                                        acc += <double>gout[ni, ci, it, ih, iw] * <double>x[ni, ci, tt, hh, iw * sw + dw - pw]
                        gw[ci, dt, dh, dw] = acc
    return gw_arr.astype(np.asarray(x).dtype, copy=False)
