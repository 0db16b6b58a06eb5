"""Routed residual stage: iterate score -> select -> evaluate -> aggregate.

Each iteration scores the unit pool (plus optional always-zero unit), then
adds the weighted unit outputs back onto the representation. Units whose
weight column is all zeros for a batch slice are skipped entirely; the pool
counts (sample, unit) evaluations for the cost model and its tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from . import ops
from .controller import CnnController, RnnController
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, Module, ModuleList
from .selection import ScorerConfig, Selection, apply_scorer
from .tensor import ShapeError, Tensor

EVAL_EPS = 1e-12  # weights at or below this are treated as exact zeros


class ComputationalUnit(Module):
    """Residual-block body F(x): conv3x3 -> BN -> ReLU -> conv3x3 -> BN.

    Shape-preserving (stride 1, padding 1); the enclosing stage adds the
    result onto its input.
    """

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None, dtype=None):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, stride=1, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(channels, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, stride=1, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype=dtype)
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(x)))))

    def macs(self, h: int, w: int) -> int:
        return self.conv1.macs(h, w) + self.conv2.macs(h, w)


class UnitPool(Module):
    def __init__(self, n_units: int, channels: int, zero_unit: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=None):
        super().__init__()
        if n_units < 1:
            raise ConfigError(f"a pool needs at least one unit, got {n_units}")
        self.units = ModuleList([ComputationalUnit(channels, rng=rng, dtype=dtype)
                                 for _ in range(n_units)])
        self.zero_unit = zero_unit
        self.channels = channels
        self.eval_count = 0  # (sample, unit) evaluations, instrumentation only

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_options(self) -> int:
        return self.n_units + (1 if self.zero_unit else 0)

    @property
    def zero_index(self) -> Optional[int]:
        return self.n_units if self.zero_unit else None


@dataclass
class ReSetConfig:
    n_units: int = 5
    n_iterations: int = 5
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    lambda1: float = 0.0
    lambda2: float = 0.0
    r_skip: Union[float, Sequence[float]] = 0.0
    controller_kind: str = "cnn"
    zero_unit: bool = False
    detach_controller_input: bool = False
    rnn_hidden: int = 64

    def __post_init__(self):
        if self.n_units < 1:
            raise ConfigError(f"n_units must be >= 1, got {self.n_units}")
        if self.n_iterations < 1:
            raise ConfigError(f"n_iterations must be >= 1, got {self.n_iterations}")
        if self.controller_kind not in ("cnn", "rnn"):
            raise ConfigError(f"controller_kind must be cnn or rnn, got {self.controller_kind!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("entropy weights must be non-negative")

    def r_skip_at(self, iteration: int) -> float:
        if isinstance(self.r_skip, (int, float)):
            return float(self.r_skip)
        return float(self.r_skip[iteration])


@dataclass
class IterationRecord:
    weights: Tensor                       # [N, m], graph-attached
    sampled: Optional[np.ndarray] = None  # [N] selected indices (hard/forced)
    log_prob: Optional[Tensor] = None     # [N] reinforce log-probs


@dataclass
class StageRoute:
    stage_index: int
    n_options: int
    zero_index: Optional[int]
    iterations: List[IterationRecord] = field(default_factory=list)
    controller_invoked: bool = True  # False when a forced policy bypassed scoring

    @property
    def n_samples(self) -> int:
        return self.iterations[0].weights.shape[0]

    def weights_array(self) -> np.ndarray:
        return np.stack([r.weights.data for r in self.iterations], axis=1)  # [N, k, m]

    def sampled_array(self) -> Optional[np.ndarray]:
        if any(r.sampled is None for r in self.iterations):
            return None
        return np.stack([r.sampled for r in self.iterations], axis=1)  # [N, k]


@dataclass
class RouteRecord:
    """Everything one batch produced across all routed stages."""

    stages: List[StageRoute] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.stages[0].n_samples

    @property
    def total_iterations(self) -> int:
        return sum(len(s.iterations) for s in self.stages)

    def to_matrix(self) -> np.ndarray:
        """Per-sample flattened route vector: all score vectors concatenated."""
        parts = [s.weights_array().reshape(self.n_samples, -1) for s in self.stages]
        return np.concatenate(parts, axis=1)

    def log_probs(self) -> List[Tensor]:
        out = []
        for s in self.stages:
            for r in s.iterations:
                if r.log_prob is not None:
                    out.append(r.log_prob)
        return out


class ReSetModule(Module):
    """One routed stage over a shared unit pool (see module docstring)."""

    def __init__(self, cfg: ReSetConfig, channels: int, stage_index: int = 0,
                 rng: Optional[np.random.Generator] = None, dtype=None):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.cfg = cfg
        self.stage_index = stage_index
        self.pool = UnitPool(cfg.n_units, channels, zero_unit=cfg.zero_unit, rng=rng, dtype=dtype)
        n_opt = self.pool.n_options
        if cfg.controller_kind == "cnn":
            self.controller = CnnController(channels, n_opt, cfg.n_iterations, rng=rng, dtype=dtype)
        else:
            self.controller = RnnController(channels, n_opt, hidden=cfg.rnn_hidden, rng=rng, dtype=dtype)
        self.forced_policy: Optional[np.ndarray] = None
        self.scorer_step = 0  # advanced by the trainer for temperature schedules

    # -- policy overrides ---------------------------------------------
    def force_policy(self, indices: Optional[Sequence[int]]):
        """Bypass controller and scorer with fixed per-iteration choices."""
        if indices is None:
            self.forced_policy = None
            return
        idx = np.asarray(indices, dtype=np.int64)
        if idx.shape != (self.cfg.n_iterations,):
            raise ConfigError(
                f"forced policy needs {self.cfg.n_iterations} indices, got shape {idx.shape}"
            )
        if idx.min() < 0 or idx.max() >= self.pool.n_options:
            raise ConfigError("forced policy index out of range")
        self.forced_policy = idx

    # -- forward --------------------------------------------------------
    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> tuple:
        if x.ndim != 4 or x.shape[1] != self.pool.channels:
            raise ShapeError(
                f"stage {self.stage_index}: input axis 1 has {x.shape[1] if x.ndim == 4 else '?'} "
                f"channels, pool units expect {self.pool.channels}"
            )
        n = x.shape[0]
        m = self.pool.n_options
        route = StageRoute(self.stage_index, m, self.pool.zero_index,
                           controller_invoked=self.forced_policy is None)
        state = None
        if isinstance(self.controller, RnnController) and self.forced_policy is None:
            state = self.controller.init_state(n, x.dtype)

        for j in range(self.cfg.n_iterations):
            if self.forced_policy is not None:
                idx = np.full(n, self.forced_policy[j], dtype=np.int64)
                hard = np.zeros((n, m), dtype=x.dtype)
                hard[np.arange(n), idx] = 1.0
                sel = Selection(weights=Tensor(hard), sampled=idx)
            else:
                cx = x.detach() if self.cfg.detach_controller_input else x
                if state is None:
                    logits = self.controller.score(cx, j)
                else:
                    logits, state = self.controller.score(cx, state)
                sel = apply_scorer(self.cfg.scorer, logits, rng, step=self.scorer_step)
            x = self._aggregate(x, sel.weights)
            route.iterations.append(IterationRecord(sel.weights, sel.sampled, sel.log_prob))
        return x, route

    def _aggregate(self, x: Tensor, weights: Tensor) -> Tensor:
        n = x.shape[0]
        acc = None
        for i in range(self.pool.n_units):
            col = weights.data[:, i]
            nz = np.nonzero(col > EVAL_EPS)[0]
            if nz.size == 0:
                continue
            wcol = ops.select_column(weights, i)
            self.pool.eval_count += int(nz.size)
            if nz.size == n:
                contrib = ops.mul(self.pool.units[i](x), ops.reshape(wcol, (n, 1, 1, 1)))
            else:
                xs = ops.gather_rows(x, nz)
                ws = ops.reshape(ops.gather_rows(wcol, nz), (nz.size, 1, 1, 1))
                contrib = ops.scatter_rows(ops.mul(self.pool.units[i](xs), ws), nz, n)
            acc = contrib if acc is None else ops.add(acc, contrib)
        if acc is None:
            return x  # all mass on the zero unit: exact identity
        return ops.add(x, acc)


# ---------------------------------------------------------- loss terms


def _entropy(p: Tensor, axis: int = -1) -> Tensor:
    # natural-log entropy with an epsilon guard for exact zeros
    eps = 1e-12
    logp = ops.log(ops.add(p, Tensor(np.full(1, eps, dtype=p.dtype))))
    return ops.neg(ops.sum_(ops.mul(p, logp), axis=axis))


def entropy_regularizer(route: RouteRecord, lambda1: float, lambda2: float) -> Tensor:
    """Two-term entropy objective over every scored iteration.

    Minimising the returned value pushes the batch-average route distribution
    toward high entropy (diverse routes across inputs) and each per-sample
    distribution toward low entropy (deterministic route per input).
    """
    if lambda1 == 0.0 and lambda2 == 0.0:
        return Tensor(np.zeros(()))
    batch_term = None
    sample_term = None
    for stage in route.stages:
        for rec in stage.iterations:
            w = rec.weights
            mean_w = ops.mean(w, axis=0)
            h_of_mean = _entropy(mean_w)
            mean_of_h = ops.mean(_entropy(w, axis=-1))
            batch_term = h_of_mean if batch_term is None else ops.add(batch_term, h_of_mean)
            sample_term = mean_of_h if sample_term is None else ops.add(sample_term, mean_of_h)
    return ops.add(ops.scale(batch_term, -lambda1), ops.scale(sample_term, lambda2))


def hybrid_rl_term(route: RouteRecord, r_skip: Union[float, Sequence[float]]) -> Tensor:
    """Negated skip reward, batch-averaged; gradients reach the controller
    through the straight-through path of the zero-unit weight."""
    total = None
    for stage in route.stages:
        if stage.zero_index is None:
            raise ConfigError("hybrid RL term requires the zero unit to be enabled")
        for j, rec in enumerate(stage.iterations):
            r = float(r_skip) if isinstance(r_skip, (int, float)) else float(r_skip[j])
            if r == 0.0:
                continue
            skip_w = ops.mean(ops.select_column(rec.weights, stage.zero_index))
            term = ops.scale(skip_w, r)
            total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return ops.neg(total)


def skip_fraction(route: RouteRecord) -> float:
    """Fraction of (sample, iteration) pairs that selected the zero unit."""
    skipped = 0
    pairs = 0
    for stage in route.stages:
        for rec in stage.iterations:
            n = rec.weights.shape[0]
            pairs += n
            if stage.zero_index is not None and rec.sampled is not None:
                skipped += int((rec.sampled == stage.zero_index).sum())
    return skipped / pairs if pairs else 0.0
