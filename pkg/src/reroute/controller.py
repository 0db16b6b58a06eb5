"""Controllers mapping the current representation to unit-selection logits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import Conv2d, Linear, LSTMCellLayer, Module, PerIterationBN
from .tensor import ShapeError, Tensor


@dataclass
class ControllerState:
    """Recurrent controller carry-over within one routed stage."""

    h: Tensor
    c: Tensor
    iteration: int = 0


class CnnController(Module):
    """Bias-free conv -> per-iteration BN -> ReLU -> GAP -> FC.

    The iteration index enters through a learned per-iteration embedding
    added to the pooled features; all other parameters are shared between
    iterations.
    """

    def __init__(self, in_ch: int, n_options: int, max_iterations: int,
                 rng: Optional[np.random.Generator] = None, dtype=None):
        super().__init__()
        rng = rng or np.random.default_rng()
        hidden = max(in_ch // 2, 8)
        self.conv = Conv2d(in_ch, hidden, 3, stride=1, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn = PerIterationBN(hidden, max_iterations, dtype=dtype)
        self.iter_embed = Tensor(np.zeros((max_iterations, hidden), dtype=self.conv.weight.dtype),
                                 requires_grad=True)
        self.fc = Linear(hidden, n_options, bias=False, rng=rng, dtype=dtype)
        self.max_iterations = max_iterations
        self.hidden = hidden
        self.n_options = n_options

    def score(self, x: Tensor, iteration: int) -> Tensor:
        if not (0 <= iteration < self.max_iterations):
            raise ConfigError(
                f"controller iteration {iteration} out of range (max {self.max_iterations})"
            )
        z = ops.relu(self.bn(self.conv(x), iteration))
        feats = ops.global_avg_pool(z)
        feats = ops.add(feats, ops.gather_rows(self.iter_embed, np.array([iteration])))
        return self.fc(feats)

    def invocation_macs(self, h: int, w: int) -> int:
        return self.conv.macs(h, w) + self.fc.macs()


class RnnController(Module):
    """Pooled features through an LSTM cell, linear head on the hidden state."""

    def __init__(self, in_ch: int, n_options: int, hidden: int = 64,
                 rng: Optional[np.random.Generator] = None, dtype=None):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.cell = LSTMCellLayer(in_ch, hidden, rng=rng, dtype=dtype)
        self.head = Linear(hidden, n_options, bias=True, rng=rng, dtype=dtype)
        self.hidden = hidden
        self.n_options = n_options

    def init_state(self, batch: int, dtype) -> ControllerState:
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return ControllerState(h=Tensor(z.copy()), c=Tensor(z.copy()), iteration=0)

    def score(self, x: Tensor, state: ControllerState) -> Tuple[Tensor, ControllerState]:
        if state.h.shape[0] != x.shape[0]:
            raise ShapeError(
                f"controller state batch {state.h.shape[0]} != input batch {x.shape[0]}"
            )
        feats = ops.global_avg_pool(x)
        h2, c2 = self.cell(feats, state.h, state.c)
        return self.head(h2), ControllerState(h=h2, c=c2, iteration=state.iteration + 1)

    def invocation_macs(self, h: int, w: int) -> int:
        return int(self.cell.wx.size + self.cell.wh.size) + self.head.macs()
