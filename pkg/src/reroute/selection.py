"""Selection mechanisms: controller logits to unit weights, with gradients.

Five scorers are provided. Soft ones (softmax, gumbel_softmax) emit dense
simplex weights and differentiate through the weights themselves. Hard ones
emit one-hot weights; gumbel_st and topk_st route gradients through their
continuous relaxation (straight-through), reinforce contributes gradients
through a score-function surrogate term built from recorded log-probs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, NumericError
from .tensor import Tensor

SCORER_KINDS = ("softmax", "gumbel_softmax", "gumbel_st", "topk_st", "reinforce")

UNIFORM_CLIP_LO = 1e-10
UNIFORM_CLIP_HI = 1.0 - 1e-7


@dataclass
class ScorerConfig:
    kind: str = "softmax"
    temperature: float = 1.0
    k: int = 1  # used by topk_st only
    temperature_floor: float = 0.1
    temperature_decay: Optional[float] = None  # multiplicative per-step rate

    def __post_init__(self):
        if self.kind not in SCORER_KINDS:
            raise ConfigError(f"unknown scorer kind {self.kind!r}, expected one of {SCORER_KINDS}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.temperature_floor <= 0:
            raise ConfigError(f"temperature floor must be positive, got {self.temperature_floor}")
        if self.temperature_decay is not None and not (0.0 < self.temperature_decay <= 1.0):
            raise ConfigError(f"temperature decay must be in (0, 1], got {self.temperature_decay}")

    def validate_options(self, n_options: int):
        if self.kind == "topk_st" and not (1 <= self.k <= n_options):
            raise ConfigError(f"topk_st k={self.k} out of range for {n_options} options")

    def temperature_at(self, step: int) -> float:
        if self.temperature_decay is None:
            return self.temperature
        return max(self.temperature_floor, self.temperature * self.temperature_decay ** step)

    def is_hard(self) -> bool:
        return self.kind in ("gumbel_st", "reinforce")


@dataclass
class ScoreVector:
    """One sample's selection outcome for one iteration."""

    logits: np.ndarray
    weights: np.ndarray
    sampled_index: Optional[int] = None


@dataclass
class Selection:
    """Batched scorer output; `weights` stays attached to the graph."""

    weights: Tensor                      # [N, m]
    sampled: Optional[np.ndarray] = None  # [N] int64, hard modes only
    log_prob: Optional[Tensor] = None     # [N], reinforce only

    def vectors(self, logits: np.ndarray) -> List[ScoreVector]:
        out = []
        for i in range(self.weights.shape[0]):
            si = None if self.sampled is None else int(self.sampled[i])
            out.append(ScoreVector(logits[i].copy(), self.weights.data[i].copy(), si))
        return out


def _check_finite(logits: Tensor):
    if not np.isfinite(logits.data).all():
        raise NumericError("selection logits contain NaN or Inf")


def gumbel_sample(u) -> np.ndarray:
    """Gumbel(0,1) variate from a uniform draw, clamped away from {0, 1}."""
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_CLIP_LO, UNIFORM_CLIP_HI)
    return -np.log(-np.log(u))


def gumbel_noise(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return gumbel_sample(rng.random(shape)).astype(dtype)


def softmax_select(logits: Tensor) -> Selection:
    _check_finite(logits)
    return Selection(weights=ops.softmax(logits, axis=-1))


def _relaxed(logits: Tensor, tau: float, rng: Optional[np.random.Generator],
             noise: Optional[np.ndarray]) -> Tensor:
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    _check_finite(logits)
    if noise is None:
        if rng is None:
            noise = np.zeros(logits.shape, dtype=logits.dtype)
        else:
            noise = gumbel_noise(rng, logits.shape, logits.dtype)
    shifted = ops.scale(ops.add(logits, Tensor(noise.astype(logits.dtype))), 1.0 / tau)
    return ops.softmax(shifted, axis=-1)


def gumbel_softmax_select(logits: Tensor, tau: float, rng: Optional[np.random.Generator] = None,
                          noise: Optional[np.ndarray] = None) -> Selection:
    """Dense relaxed sample: softmax((logits + g) / tau)."""
    return Selection(weights=_relaxed(logits, tau, rng, noise))


def gumbel_st_select(logits: Tensor, tau: float, rng: Optional[np.random.Generator] = None,
                     noise: Optional[np.ndarray] = None) -> Selection:
    """One-hot forward at argmax of the relaxed sample; relaxed gradients."""
    z = _relaxed(logits, tau, rng, noise)
    idx = z.data.argmax(axis=-1)
    hard = np.zeros_like(z.data)
    hard[np.arange(len(idx)), idx] = 1.0
    return Selection(weights=ops.straight_through(z, hard), sampled=idx.astype(np.int64))


def topk_st_select(logits: Tensor, k: int) -> Selection:
    """Keep the k largest softmax masses, renormalised; dense softmax gradients."""
    m = logits.shape[-1]
    if not (1 <= k <= m):
        raise ConfigError(f"topk_st k={k} out of range for {m} options")
    p = softmax_select(logits).weights
    if k == m:
        return Selection(weights=p)
    order = np.argpartition(-p.data, k - 1, axis=-1)[:, :k]
    mask = np.zeros_like(p.data)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    masked = p.data * mask
    hard = masked / masked.sum(axis=-1, keepdims=True)
    return Selection(weights=ops.straight_through(p, hard))


def reinforce_select(logits: Tensor, rng: np.random.Generator) -> Selection:
    """Sample an index per row; weights carry no gradient, log-probs do."""
    _check_finite(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    u = rng.random((logits.shape[0], 1))
    idx = np.minimum((probs.cumsum(axis=-1) < u).sum(axis=-1), logits.shape[-1] - 1)
    hard = np.zeros_like(logits.data)
    hard[np.arange(len(idx)), idx] = 1.0
    log_prob = ops.take_per_row(ops.log_softmax(logits, axis=-1), idx)
    return Selection(weights=Tensor(hard), sampled=idx.astype(np.int64), log_prob=log_prob)


def reinforce_term(log_probs: Sequence[Tensor], loss_per_sample: np.ndarray,
                   baseline: float) -> Tensor:
    """Score-function surrogate whose backward yields grad log p * (loss - baseline).

    `loss_per_sample` must be detached values; averaging over the batch makes
    the surrogate's gradient the Monte-Carlo estimate of the expected-loss
    gradient at the recorded sampling distribution.
    """
    if not log_probs:
        raise ConfigError("reinforce_term needs at least one recorded log-prob")
    adv = np.asarray(loss_per_sample, dtype=np.float64) - float(baseline)
    total = None
    for lp in log_probs:
        contrib = ops.mul(lp, Tensor(adv.astype(lp.dtype)))
        total = contrib if total is None else ops.add(total, contrib)
    return ops.mean(total)


def apply_scorer(cfg: ScorerConfig, logits: Tensor, rng: Optional[np.random.Generator] = None,
                 step: int = 0, noise: Optional[np.ndarray] = None) -> Selection:
    """Dispatch a ScorerConfig; `rng=None` disables sampling noise."""
    cfg.validate_options(logits.shape[-1])
    tau = cfg.temperature_at(step)
    if cfg.kind == "softmax":
        return softmax_select(logits)
    if cfg.kind == "gumbel_softmax":
        return gumbel_softmax_select(logits, tau, rng, noise)
    if cfg.kind == "gumbel_st":
        return gumbel_st_select(logits, tau, rng, noise)
    if cfg.kind == "topk_st":
        return topk_st_select(logits, cfg.k)
    if cfg.kind == "reinforce":
        if rng is None:
            # noise-free analysis mode: realized greedy choice
            return gumbel_st_select(logits, tau, rng=None)
        return reinforce_select(logits, rng)
    raise ConfigError(f"unknown scorer kind {cfg.kind!r}")
