"""Compiled convolution and pooling kernels (numba, sequential).

Loops are ordered so the innermost axis walks a contiguous transposed
buffer, which LLVM vectorises. Kernels stay single-threaded: summation
order is fixed, so results are reproducible for a given dtype.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def conv2d_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0))  # [c, kh, kw, o]
    out = np.zeros((n, ho, wo, o), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for ky in range(kh):
                for kx in range(kw):
                    wv = wt[ci, ky, kx]
                    for yi in range(ho):
                        iy = yi * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for xi in range(wo):
                            ix = xi * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            xv = x[ni, ci, iy, ix]
                            if xv == 0.0:
                                continue
                            acc = out[ni, yi, xi]
                            for oi in range(o):
                                acc[oi] += xv * wv[oi]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


@njit(cache=True, nogil=True)
def conv2d_backward_input(gy, w, h, wd, stride, pad):
    n, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))  # [n, ho, wo, o]
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))    # [kh, kw, c, o]
    gxt = np.zeros((n, h, wd, c), dtype=gy.dtype)
    for ni in range(n):
        for yi in range(ho):
            for xi in range(wo):
                gvec = gyt[ni, yi, xi]
                for ky in range(kh):
                    iy = yi * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(kw):
                        ix = xi * stride + kx - pad
                        if ix < 0 or ix >= wd:
                            continue
                        dst = gxt[ni, iy, ix]
                        for ci in range(c):
                            wv = wt[ky, kx, ci]
                            acc = 0.0
                            for oi in range(o):
                                acc += gvec[oi] * wv[oi]
                            dst[ci] += acc
    return np.ascontiguousarray(gxt.transpose(0, 3, 1, 2))


@njit(cache=True, nogil=True)
def conv2d_backward_weight(gy, x, kh, kw, stride, pad):
    n, o, ho, wo = gy.shape
    _, c, h, wd = x.shape
    gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))  # [n, ho, wo, o]
    gwt = np.zeros((kh, kw, c, o), dtype=gy.dtype)
    for ni in range(n):
        for yi in range(ho):
            for xi in range(wo):
                gvec = gyt[ni, yi, xi]
                for ky in range(kh):
                    iy = yi * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(kw):
                        ix = xi * stride + kx - pad
                        if ix < 0 or ix >= wd:
                            continue
                        for ci in range(c):
                            xv = x[ni, ci, iy, ix]
                            if xv == 0.0:
                                continue
                            dst = gwt[ky, kx, ci]
                            for oi in range(o):
                                dst[oi] += xv * gvec[oi]
    return np.ascontiguousarray(gwt.transpose(3, 2, 0, 1))


@njit(cache=True, nogil=True)
def maxpool_forward(xp, k, stride):
    # xp is pre-padded (pads carry -inf); ties resolve to the lowest flat index
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.empty((n, c, ho, wo), dtype=xp.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for yi in range(ho):
                y0 = yi * stride
                for xi in range(wo):
                    x0 = xi * stride
                    best = xp[ni, ci, y0, x0]
                    bi = y0 * wp + x0
                    for ky in range(k):
                        for kx in range(k):
                            v = xp[ni, ci, y0 + ky, x0 + kx]
                            if v > best:
                                best = v
                                bi = (y0 + ky) * wp + (x0 + kx)
                    out[ni, ci, yi, xi] = best
                    idx[ni, ci, yi, xi] = bi
    return out, idx


@njit(cache=True, nogil=True)
def maxpool_backward(gy, idx, hp, wp):
    n, c, ho, wo = gy.shape
    gxp = np.zeros((n, c, hp, wp), dtype=gy.dtype)
    for ni in range(n):
        for ci in range(c):
            for yi in range(ho):
                for xi in range(wo):
                    f = idx[ni, ci, yi, xi]
                    gxp[ni, ci, f // wp, f % wp] += gy[ni, ci, yi, xi]
    return gxp
