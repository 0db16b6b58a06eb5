"""Pure-numpy kernel backend: im2col/col2im convolutions on BLAS matmuls."""
import numpy as np


def _col_view(xp, kh, kw, ho, wo, stride):
    # read-only strided view [n, c, kh, kw, ho, wo]
    n, c = xp.shape[:2]
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, c, kh, kw, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        writeable=False,
    )


def conv2d_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _col_view(xp, kh, kw, ho, wo, stride).reshape(n, c * kh * kw, ho * wo)
    y = w.reshape(o, -1) @ cols
    return np.ascontiguousarray(y.reshape(n, o, ho, wo))


def conv2d_backward_input(gy, w, h, wd, stride, pad):
    n, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gcols = w.reshape(o, -1).T @ gy.reshape(n, o, ho * wo)
    gcols = gcols.reshape(n, c, kh, kw, ho, wo)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for ky in range(kh):
        ye = ky + stride * (ho - 1) + 1
        for kx in range(kw):
            xe = kx + stride * (wo - 1) + 1
            gxp[:, :, ky:ye:stride, kx:xe:stride] += gcols[:, :, ky, kx]
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd])
    return gxp


def conv2d_backward_weight(gy, x, kh, kw, stride, pad):
    n, o, ho, wo = gy.shape
    c = x.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _col_view(xp, kh, kw, ho, wo, stride).reshape(n, c * kh * kw, ho * wo)
    gw = np.einsum("nol,nkl->ok", gy.reshape(n, o, ho * wo), cols, optimize=True)
    return np.ascontiguousarray(gw.reshape(o, c, kh, kw))


def maxpool_forward(xp, k, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = _col_view(xp, k, k, ho, wo, stride)  # [n, c, k, k, ho, wo]
    flat = win.reshape(n, c, k * k, ho, wo)
    ki = flat.argmax(axis=2)
    out = np.take_along_axis(flat, ki[:, :, None], axis=2)[:, :, 0]
    oy = np.arange(ho)[:, None] * stride
    ox = np.arange(wo)[None, :] * stride
    idx = (oy + ki // k) * wp + (ox + ki % k)
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(gy, idx, hp, wp):
    n, c = gy.shape[:2]
    gxp = np.zeros((n, c, hp * wp), dtype=gy.dtype)
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gxp, (nn, cc, idx), gy)
    return gxp.reshape(n, c, hp, wp)
