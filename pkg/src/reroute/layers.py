"""Parameterised layers and the lightweight module tree they live in.

Modules discover children and parameters by walking instance attributes in
definition order, which keeps checkpoint names stable across runs.
"""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .errors import UninitializedStatsError
from .tensor import Tensor, default_dtype


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Module:
    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    # -- tree walking ----------------------------------------------------
    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._children():
            yield from child.named_modules(prefix + name + ".")

    # -- modes and state -------------------------------------------------
    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        own_params = dict(self.named_parameters())
        own_bufs = dict(self.named_buffers())
        missing = (set(own_params) | set(own_bufs)) - set(state)
        extra = set(state) - (set(own_params) | set(own_bufs))
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own_params.items():
            if name in state:
                if p.data.shape != state[name].shape:
                    raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}")
                p.data = np.ascontiguousarray(state[name].astype(p.data.dtype, copy=True))
        for name, b in own_bufs.items():
            if name in state:
                if b.shape != state[name].shape:
                    raise ValueError(f"shape mismatch for buffer {name}: {b.shape} vs {state[name].shape}")
                b[...] = state[name].astype(b.dtype, copy=False)
        return self

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items: List[Module] = list(items)

    def append(self, m: Module):
        self._items.append(m)
        return self

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]

    def _children(self):
        for i, m in enumerate(self._items):
            yield str(i), m


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = False, rng: Optional[np.random.Generator] = None,
                 dtype=None):
        super().__init__()
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng()
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        b = getattr(self, "bias", None)
        if b is not None:
            y = ops.add(y, ops.reshape(b, (1, -1, 1, 1)))
        return y

    def macs(self, out_h: int, out_w: int) -> int:
        o, c, kh, kw = self.weight.shape
        return out_h * out_w * o * c * kh * kw


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=None):
        super().__init__()
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng()
        self.weight = Tensor(he_normal(rng, (in_f, out_f), in_f, dtype), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_f, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, getattr(self, "bias", None))

    def macs(self) -> int:
        return int(self.weight.size)


class BatchNorm2d(Module):
    """Per-channel normalisation with affine parameters and running statistics.

    While `stats_frozen` is set (or in eval mode) the layer normalises with
    its running statistics, so frozen buffers stay bitwise identical.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=None):
        super().__init__()
        dtype = dtype or default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._buffers["initialized"] = np.zeros(1, dtype=np.int8)
        self.eps = eps
        self.momentum = momentum
        self.stats_frozen = False

    @property
    def initialized(self) -> bool:
        return bool(self._buffers["initialized"][0])

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            from .tensor import ShapeError

            raise ShapeError(f"batch_norm expects [N,{self.gamma.shape[0]},H,W], got {x.shape}")
        if self.training and not self.stats_frozen:
            mu = ops.mean(x, axis=(0, 2, 3), keepdims=True)
            centered = ops.sub(x, mu)
            var = ops.mean(ops.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            inv = ops.div(Tensor(np.ones(1, dtype=x.dtype)), ops.sqrt(ops.add(var, Tensor(np.full(1, self.eps, dtype=x.dtype)))))
            xhat = ops.mul(centered, inv)
            m = self.momentum
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm[...] = (1 - m) * rm + m * mu.data.reshape(-1).astype(rm.dtype)
            rv[...] = (1 - m) * rv + m * var.data.reshape(-1).astype(rv.dtype)
            self._buffers["initialized"][0] = 1
        else:
            if not self.initialized:
                raise UninitializedStatsError(
                    "batch norm evaluated with running statistics that were never updated"
                )
            rm = Tensor(self._buffers["running_mean"].reshape(1, -1, 1, 1))
            rv = Tensor(self._buffers["running_var"].reshape(1, -1, 1, 1))
            inv_np = 1.0 / np.sqrt(rv.data + self.eps)
            xhat = ops.mul(ops.sub(x, rm), Tensor(inv_np.astype(x.dtype)))
        y = ops.add(
            ops.mul(xhat, ops.reshape(self.gamma, (1, -1, 1, 1))),
            ops.reshape(self.beta, (1, -1, 1, 1)),
        )
        return y

    def seed_stats(self, mean: np.ndarray, var: np.ndarray):
        """Install running statistics directly (tests and stage oracles)."""
        self._buffers["running_mean"][...] = mean
        self._buffers["running_var"][...] = var
        self._buffers["initialized"][0] = 1


class PerIterationBN(Module):
    """Independent BatchNorm2d per controller iteration; slots never share state."""

    def __init__(self, channels: int, slots: int, dtype=None):
        super().__init__()
        self.slots = ModuleList([BatchNorm2d(channels, dtype=dtype) for _ in range(slots)])

    def __len__(self):
        return len(self.slots)

    def __call__(self, x: Tensor, iteration: int) -> Tensor:
        return self.slots[iteration](x)


class LSTMCellLayer(Module):
    def __init__(self, in_f: int, hidden: int, rng: Optional[np.random.Generator] = None, dtype=None):
        super().__init__()
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng()
        self.wx = Tensor(he_normal(rng, (in_f, 4 * hidden), in_f, dtype), requires_grad=True)
        self.wh = Tensor(he_normal(rng, (hidden, 4 * hidden), hidden, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(4 * hidden, dtype=dtype), requires_grad=True)
        self.hidden = hidden

    def params(self) -> ops.LSTMParams:
        return ops.LSTMParams(self.wx, self.wh, self.b)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        return ops.lstm_cell(x, h, c, self.params())
