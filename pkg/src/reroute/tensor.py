"""Dense tensors on numpy buffers with tape-based reverse-mode differentiation.

Every differentiable op records a backward closure plus its parent tensors.
Creation order doubles as topological order (an op can only run after its
inputs exist), so backward() replays reachable nodes sorted by descending
creation id, which is exactly reverse execution order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from ._env import DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised when operand dimensions are inconsistent."""


class GraphError(RuntimeError):
    """Raised for invalid differentiation-graph usage (e.g. double backward)."""


_ids = itertools.count()
_grad_enabled = True

_default_dtype = np.dtype(DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("element type must be float32 or float64")
    _default_dtype = dtype


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default element type."""
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block; forwards run without recording."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_nid", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
        self.data: np.ndarray = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._nid = next(_ids)
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() needs a single-element tensor, shape is {self.shape}")

    # -- graph ---------------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Run the reverse pass, accumulating into .grad of reachable leaves."""
        if self._consumed:
            raise GraphError("this graph was already consumed by a backward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._nid, reverse=True)

        grads = {id(self): grad}
        for t in nodes:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is not None:
                if t._consumed:
                    raise GraphError("this graph was already consumed by a backward pass")
                t._backward(g, grads)
                t._backward = None
                t._parents = ()
                t._consumed = True
            elif t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g

    # -- operator sugar (delegates to ops) -------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(_wrap(other, self.dtype), self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create an op-output tensor, taping `backward` when gradients are live.

    `backward(gout, grads)` must add each parent's contribution into the
    `grads` dict keyed by `id(parent)`, only for parents that require grad.
    """
    out = Tensor(out_data)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def accumulate(grads: dict, parent: Tensor, g: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    k = id(parent)
    if k in grads:
        grads[k] = grads[k] + g
    else:
        grads[k] = g


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)


def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or default_dtype()), requires_grad=requires_grad)
