"""Optimizers, gradient clipping, and learning-rate schedules."""
from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def clip_gradients(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    params = [p for p in params if p.grad is not None]
    sq = 0.0
    for p in params:
        g = p.grad
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0:
        s = max_norm / norm
        for p in params:
            p.grad = p.grad * s
    return norm


class SGD:
    """Momentum SGD with the v <- momentum*v + g convention and L2 weight decay
    added to the gradient."""

    def __init__(self, named_params: Dict[str, Tensor], lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, frozen: Optional[Set[str]] = None):
        frozen = frozen or set()
        for name, p in self.params.items():
            if name in frozen or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
            else:
                v = g
            p.data = p.data - self.lr * v

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f"optim.sgd.v.{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        prefix = "optim.sgd.v."
        self.velocity = {k[len(prefix):]: v.copy() for k, v in arrays.items() if k.startswith(prefix)}


class Adam:
    """Bias-corrected Adam."""

    def __init__(self, named_params: Dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, frozen: Optional[Set[str]] = None):
        frozen = frozen or set()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if name in frozen or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"optim.adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.adam.v.{k}": v for k, v in self.v.items()})
        out["optim.adam.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        self.m = {k[len("optim.adam.m."):]: v.copy() for k, v in arrays.items()
                  if k.startswith("optim.adam.m.")}
        self.v = {k[len("optim.adam.v."):]: v.copy() for k, v in arrays.items()
                  if k.startswith("optim.adam.v.")}
        if "optim.adam.t" in arrays:
            self.t = int(arrays["optim.adam.t"][0])


class LRSchedule:
    """Stepwise learning-rate policies.

    kind "milestones": multiply by `factor` when crossing each fraction of the
    total budget. kind "every":  multiply by `factor` every `period` steps.
    kind "constant": fixed rate.
    """

    def __init__(self, base_lr: float, kind: str = "constant", factor: float = 0.1,
                 milestones: Tuple[float, ...] = (0.5, 0.75), period: int = 1000,
                 total_steps: int = 0):
        if kind not in ("constant", "milestones", "every"):
            raise ConfigError(f"unknown lr schedule kind {kind!r}")
        self.base_lr = base_lr
        self.kind = kind
        self.factor = factor
        self.milestones = tuple(milestones)
        self.period = period
        self.total_steps = total_steps

    def at(self, step: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        if self.kind == "every":
            return self.base_lr * self.factor ** (step // self.period)
        crossed = sum(1 for mfrac in self.milestones if step >= mfrac * self.total_steps)
        return self.base_lr * self.factor ** crossed


def make_optimizer(algo: str, named_params: Dict[str, Tensor], lr: float,
                   momentum: float = 0.9, weight_decay: float = 0.0,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if algo == "sgd":
        return SGD(named_params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if algo == "adam":
        return Adam(named_params, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                    weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {algo!r}")
