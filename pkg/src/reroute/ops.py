"""Differentiable operations over Tensor.

Elementwise/reduction ops are numpy expressions with closure backwards;
convolution and pooling dispatch to the compiled kernel backend.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels
from .tensor import GraphError, ShapeError, Tensor, accumulate, make_op, unbroadcast

# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g, grads):
        accumulate(grads, a, unbroadcast(g, a.data.shape))
        accumulate(grads, b, unbroadcast(g, b.data.shape))

    return make_op(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g, grads):
        accumulate(grads, a, unbroadcast(g, a.data.shape))
        accumulate(grads, b, unbroadcast(-g, b.data.shape))

    return make_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g, grads):
        accumulate(grads, a, unbroadcast(g * b.data, a.data.shape))
        accumulate(grads, b, unbroadcast(g * a.data, b.data.shape))

    return make_op(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def backward(g, grads):
        accumulate(grads, a, unbroadcast(g / b.data, a.data.shape))
        accumulate(grads, b, unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return make_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, grads):
        accumulate(grads, a, -g)

    return make_op(-a.data, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g, grads):
        accumulate(grads, a, g * s)

    return make_op(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g, grads):
        accumulate(grads, a, g @ b.data.T)
        accumulate(grads, b, a.data.T @ g)

    return make_op(out, (a, b), backward)


# ------------------------------------------------------------- elementwise


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g, grads):
        accumulate(grads, a, g * out)

    return make_op(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g, grads):
        accumulate(grads, a, g / a.data)

    return make_op(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g, grads):
        accumulate(grads, a, g * (0.5 / out))

    return make_op(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g, grads):
        accumulate(grads, a, g * (1.0 - out * out))

    return make_op(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g, grads):
        accumulate(grads, a, g * out * (1.0 - out))

    return make_op(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g, grads):
        accumulate(grads, a, g * mask)

    return make_op(a.data * mask, (a,), backward)


# -------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, grads):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            shape = list(a.data.shape)
            for i in sorted(d % a.data.ndim for d in ax):
                shape[i] = 1
            g = g.reshape(shape)
        accumulate(grads, a, np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False))

    return make_op(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for d in ax:
            count *= a.data.shape[d]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------ shape/indexing


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g, grads):
        accumulate(grads, a, g.reshape(a.data.shape))

    return make_op(out, (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop]

    def backward(g, grads):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        accumulate(grads, a, full)

    return make_op(out, (a,), backward)


def select_column(a: Tensor, j: int) -> Tensor:
    out = a.data[:, j]

    def backward(g, grads):
        full = np.zeros_like(a.data)
        full[:, j] = g
        accumulate(grads, a, full)

    return make_op(out, (a,), backward)


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def backward(g, grads):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        accumulate(grads, a, full)

    return make_op(out, (a,), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def backward(g, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        accumulate(grads, a, full)

    return make_op(out, (a,), backward)


def scatter_rows(vals: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of `vals` at positions `idx` of a zero tensor with n_rows rows."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + vals.data.shape[1:], dtype=vals.dtype)
    out[idx] = vals.data

    def backward(g, grads):
        accumulate(grads, vals, g[idx])

    return make_op(out, (vals,), backward)


def subsample2(a: Tensor) -> Tensor:
    """Spatial stride-2 subsample of an NCHW tensor (identity-shortcut downsampling)."""
    out = np.ascontiguousarray(a.data[:, :, ::2, ::2])

    def backward(g, grads):
        full = np.zeros_like(a.data)
        full[:, :, ::2, ::2] = g
        accumulate(grads, a, full)

    return make_op(out, (a,), backward)


def pad_channels(a: Tensor, extra: int) -> Tensor:
    """Append `extra` zero channels along axis 1."""
    n, c, h, w = a.data.shape
    out = np.zeros((n, c + extra, h, w), dtype=a.dtype)
    out[:, :c] = a.data

    def backward(g, grads):
        accumulate(grads, a, np.ascontiguousarray(g[:, :c]))

    return make_op(out, (a,), backward)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward the discrete `hard` values, route gradients to `soft` unchanged."""
    if hard.shape != soft.data.shape:
        raise ShapeError(f"straight_through shapes differ: {hard.shape} vs {soft.data.shape}")

    def backward(g, grads):
        accumulate(grads, soft, g)

    return make_op(np.asarray(hard, dtype=soft.dtype), (soft,), backward)


# ------------------------------------------------------------------ softmax


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g, grads):
        dot = (g * out).sum(axis=axis, keepdims=True)
        accumulate(grads, a, out * (g - dot))

    return make_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g, grads):
        sm = np.exp(out)
        accumulate(grads, a, g - sm * g.sum(axis=axis, keepdims=True))

    return make_op(out, (a,), backward)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [N,C] and labels [N], got {logits.shape}, {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = -logp[np.arange(n), labels].mean()

    def backward(g, grads):
        sm = np.exp(logp)
        sm[np.arange(n), labels] -= 1.0
        accumulate(grads, logits, (float(g) / n) * sm)

    return make_op(np.asarray(out, dtype=logits.dtype), (logits,), backward)


def nll_per_sample(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    """Detached per-sample cross-entropy values (for REINFORCE-style baselines)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(z - lse)[np.arange(len(labels)), labels]


# ------------------------------------------------------------- nn primitives


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: x axis 1 has {c}, weight axis 1 has {cw}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d kernel ({kh}x{kw}) exceeds padded input (axes 2,3: {h + 2 * padding}x{w + 2 * padding})"
        )
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d dtype mismatch: {x.dtype} vs {weight.dtype}")
    out = kernels.conv2d_forward(x.data, weight.data, stride, padding)

    def backward(g, grads):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            accumulate(grads, x, kernels.conv2d_backward_input(g, weight.data, h, w, stride, padding))
        if weight.requires_grad:
            accumulate(grads, weight, kernels.conv2d_backward_weight(g, x.data, kh, kw, stride, padding))

    return make_op(out, (x, weight), backward)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: Union[int, str] = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects a 4-d tensor, got {x.shape}")
    n, c, h, w = x.shape
    if padding == "same":
        # pad bottom/right only, so output dims are ceil(dim / stride)
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max(0, (oh - 1) * stride + kernel - h)
        pw = max(0, (ow - 1) * stride + kernel - w)
        pads = ((0, 0), (0, 0), (0, ph), (0, pw))
    else:
        p = int(padding)
        pads = ((0, 0), (0, 0), (p, p), (p, p))
    if any(sum(p) for p in pads[2:]):
        xp = np.pad(x.data, pads, constant_values=-np.inf)
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if kernel > hp or kernel > wp:
        raise ShapeError(f"max_pool2d kernel {kernel} exceeds padded input {hp}x{wp}")
    out, idx = kernels.maxpool_forward(np.ascontiguousarray(xp), kernel, stride)

    def backward(g, grads):
        gxp = kernels.maxpool_backward(np.ascontiguousarray(g), idx, hp, wp)
        (t0, _), (l0, _) = pads[2], pads[3]
        accumulate(grads, x, np.ascontiguousarray(gxp[:, :, t0:t0 + h, l0:l0 + w]))

    return make_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d tensor, got {x.shape}")
    return mean(x, axis=(2, 3))


@dataclass
class LSTMParams:
    """Gate parameters in i|f|g|o block order: wx [D,4H], wh [H,4H], b [4H]."""

    wx: Tensor
    wh: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: LSTMParams):
    """One LSTM step; returns (h', c')."""
    hid = params.hidden
    if x.shape[0] != h.shape[0] or h.shape != c.shape:
        raise ShapeError(f"lstm_cell batch/state mismatch: x {x.shape}, h {h.shape}, c {c.shape}")
    if x.shape[1] != params.wx.shape[0]:
        raise ShapeError(f"lstm_cell feature dim {x.shape[1]} != wx rows {params.wx.shape[0]}")
    z = add(add(matmul(x, params.wx), matmul(h, params.wh)), params.b)
    i = sigmoid(slice_cols(z, 0, hid))
    f = sigmoid(slice_cols(z, hid, 2 * hid))
    g = tanh(slice_cols(z, 2 * hid, 3 * hid))
    o = sigmoid(slice_cols(z, 3 * hid, 4 * hid))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new
