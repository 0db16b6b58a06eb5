"""Training loops: loss assembly, freezing, phases, and staged pipelines.

A pipeline is an ordered list of phases. Each phase may swap the scorer kind
in place (controller parameters persist), restrict the trainable scope, and
set regularizer weights or the skip reward. Freezing covers batch-norm
running statistics: a stage whose affine parameters are frozen normalises
with its stored statistics and never updates them.
"""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BatchStream, LabeledImages, normalize
from .errors import ConfigError
from .layers import BatchNorm2d, Module
from .network import Network, cost_report
from .optim import LRSchedule, clip_gradients, make_optimizer
from .reset import ReSetModule, RouteRecord, entropy_regularizer, hybrid_rl_term, skip_fraction
from .selection import ScorerConfig, reinforce_term
from .tensor import Tensor, no_grad

METRICS_COLUMNS = ["step", "loss", "ce", "entropy_term", "hybrl_term", "lr", "skip_fraction", "val_acc"]


# ------------------------------------------------------------ loss assembly


def l2_penalty(params: Sequence[Tensor], decay: float) -> Tensor:
    total = None
    for p in params:
        t = ops.sum_(ops.mul(p, p))
        total = t if total is None else ops.add(total, t)
    return ops.scale(total, 0.5 * decay)


def assemble_loss(logits: Tensor, labels: np.ndarray, route: RouteRecord, *,
                  lambda1: float = 0.0, lambda2: float = 0.0,
                  r_skip: Union[float, Sequence[float]] = 0.0,
                  reinforce_baseline: Optional[float] = None,
                  l2: float = 0.0, params: Optional[Sequence[Tensor]] = None):
    """Classification loss plus routing terms; returns (loss, parts dict)."""
    ce = ops.cross_entropy_loss(logits, labels)
    parts = {"ce": ce.item(), "entropy_term": 0.0, "hybrl_term": 0.0}
    loss = ce
    if route.stages and (lambda1 or lambda2):
        ent = entropy_regularizer(route, lambda1, lambda2)
        parts["entropy_term"] = ent.item()
        loss = ops.add(loss, ent)
    nonzero_r = (isinstance(r_skip, (int, float)) and r_skip != 0) or (
        not isinstance(r_skip, (int, float)) and any(v != 0 for v in r_skip))
    if route.stages and nonzero_r:
        hyb = hybrid_rl_term(route, r_skip)
        parts["hybrl_term"] = hyb.item()
        loss = ops.add(loss, hyb)
    log_probs = route.log_probs() if route.stages else []
    if log_probs:
        baseline = 0.0 if reinforce_baseline is None else float(reinforce_baseline)
        per_sample = ops.nll_per_sample(logits, labels)
        loss = ops.add(loss, reinforce_term(log_probs, per_sample, baseline))
    if l2 > 0 and params:
        loss = ops.add(loss, l2_penalty(params, l2))
    parts["loss"] = loss.item()
    return loss, parts


def entropy_decay_factor(step: int, total_steps: int) -> float:
    """Linear fade of the entropy weights to 0 over the final third of a budget."""
    if total_steps <= 0:
        return 1.0
    start = 2 * total_steps / 3
    if step <= start:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - start))


# ------------------------------------------------------------------ phases


@dataclass
class Phase:
    name: str
    steps: Optional[int] = None          # None -> run to convergence
    scorer: Optional[ScorerConfig] = None  # None -> keep the current scorer
    trainable: Union[str, Sequence[str]] = "all"
    lambda1: float = 0.0
    lambda2: float = 0.0
    r_skip: Union[float, Sequence[float]] = 0.0
    lr: Optional[float] = None
    entropy_decay: bool = False
    max_steps: int = 20000               # hard cap for convergence phases
    converge_window: int = 5             # evals without improvement


@dataclass
class PipelineSpec:
    phases: List[Phase]


def relaxation_pipeline(pretrain_steps: int, controller_batches: int = 5000,
                        final_steps: Optional[int] = None,
                        r_skip: Union[float, Sequence[float]] = 0.1,
                        lambda1: float = 0.0, lambda2: float = 0.0,
                        tau: float = 1.0) -> PipelineSpec:
    """The canonical eight-phase relaxation: dense pretrain, freeze everything
    but the controller, soften to relaxed sampling, harden to straight-through,
    then reward skips."""
    gsm = ScorerConfig("gumbel_softmax", temperature=tau)
    gst = ScorerConfig("gumbel_st", temperature=tau)
    return PipelineSpec([
        Phase("pretrain_softmax", steps=pretrain_steps, scorer=ScorerConfig("softmax"),
              trainable="all", lambda1=lambda1, lambda2=lambda2),
        Phase("freeze_all_but_controller", steps=0, trainable="controller"),
        Phase("switch_gumbel_softmax", steps=0, scorer=gsm, trainable="controller"),
        Phase("train_controller_gsm", steps=controller_batches, trainable="controller"),
        Phase("switch_gumbel_st", steps=0, scorer=gst, trainable="controller"),
        Phase("train_controller_gst", steps=None, trainable="controller"),
        Phase("add_hybrid_rl", steps=0, trainable="controller", r_skip=r_skip),
        Phase("train_tradeoff", steps=final_steps, trainable="controller", r_skip=r_skip),
    ])


def two_phase_schedule(rule: str = "fixed", rounds: int = 3, controller_steps: int = 100,
                       unit_steps: int = 100) -> PipelineSpec:
    """Alternate controller-only and unit-only phases under a switching rule."""
    if rule not in ("fixed", "convergence", "progressive"):
        raise ConfigError(f"unknown two-phase rule {rule!r}")
    phases = []
    c_steps = controller_steps
    for r in range(rounds):
        if rule == "convergence":
            phases.append(Phase(f"controller_{r}", steps=None, trainable="controller"))
            phases.append(Phase(f"units_{r}", steps=None, trainable="units+head"))
        else:
            phases.append(Phase(f"controller_{r}", steps=c_steps, trainable="controller"))
            phases.append(Phase(f"units_{r}", steps=unit_steps, trainable="units+head"))
            if rule == "progressive":
                c_steps *= 2
    return PipelineSpec(phases)


def incremental_schedule(steps_per_phase: int = 100) -> PipelineSpec:
    """Unfreeze from the head backwards: head, +stage3, +stage2, everything."""
    return PipelineSpec([
        Phase("head_only", steps=steps_per_phase, trainable=["head"]),
        Phase("head_stage3", steps=steps_per_phase, trainable=["head", "stage3"]),
        Phase("head_stage23", steps=steps_per_phase, trainable=["head", "stage3", "stage2"]),
        Phase("all", steps=steps_per_phase, trainable="all"),
    ])


def resolve_trainable(model: Module, spec: Union[str, Sequence[str]]) -> Set[str]:
    """Map a trainable scope to the frozen-parameter name set."""
    names = [n for n, _ in model.named_parameters()]
    if isinstance(spec, str):
        if spec == "all":
            return set()
        if spec == "controller":
            keep = lambda n: ".controller." in n
        elif spec == "head":
            keep = lambda n: n.startswith("head.")
        elif spec == "units+head":
            keep = lambda n: ".controller." not in n
        else:
            raise ConfigError(f"unknown trainable scope {spec!r}")
    else:
        prefixes = tuple(spec)
        keep = lambda n: n.startswith(prefixes)
    return {n for n in names if not keep(n)}


def apply_bn_freeze(model: Module, frozen: Set[str]) -> None:
    for name, mod in model.named_modules():
        if isinstance(mod, BatchNorm2d):
            key = (name + "." if name else "") + "gamma"
            mod.stats_frozen = key in frozen


def trainable_checksum(model: Module, frozen: Set[str], inverse: bool = False) -> str:
    """Hash of the frozen (or trainable) parameter and buffer bytes."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if (name in frozen) != inverse:
            h.update(name.encode())
            h.update(p.data.tobytes())
    frozen_bn_prefixes = {n[: -len("gamma")] for n in frozen if n.endswith("gamma")}
    for name, b in sorted(model.named_buffers()):
        owner = name.rsplit(".", 1)[0] + "."
        if (owner in frozen_bn_prefixes) != inverse:
            h.update(name.encode())
            h.update(b.tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ trainer


@dataclass
class TrainState:
    step: int = 0
    phase_index: int = 0
    ema_baseline: float = 0.0
    baseline_ready: bool = False
    best_val: float = -1.0


class Trainer:
    BASELINE_DECAY = 0.99

    def __init__(self, model: Network, train_data: LabeledImages, val_data: LabeledImages,
                 mean: Sequence[float], std: Sequence[float], *, seed: int = 0,
                 batch_size: int = 128, algo: str = "sgd", lr: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 1e-4, clip_norm: float = 5.0,
                 lr_schedule: Optional[LRSchedule] = None, eval_every: int = 100,
                 eval_batch: int = 256, augment: bool = True, out_dir: Optional[str] = None,
                 checkpoint_every: int = 0, run_config: Optional[dict] = None):
        self.model = model
        self.named_params = dict(model.named_parameters())
        self.opt = make_optimizer(algo, self.named_params, lr=lr, momentum=momentum,
                                  weight_decay=weight_decay)
        self.base_lr = lr
        self.lr_schedule = lr_schedule or LRSchedule(lr, "constant")
        self.clip_norm = clip_norm
        self.eval_every = eval_every
        self.eval_batch = eval_batch
        self.batch_size = batch_size
        self.out_dir = out_dir
        self.checkpoint_every = checkpoint_every
        self.run_config = run_config or {}
        self.mean, self.std = list(mean), list(std)
        self.val_data = val_data
        ss = np.random.SeedSequence(seed)
        data_seed, scorer_seed = ss.spawn(2)
        self.data_rng = np.random.default_rng(data_seed)
        self.scorer_rng = np.random.default_rng(scorer_seed)
        self.stream = BatchStream(train_data, batch_size, self.data_rng, self.mean, self.std,
                                  augment_data=augment, dtype=model.dtype_)
        self.state = TrainState()
        self._frozen: Set[str] = set()
        self.metrics_rows: List[dict] = []
        self.policy_log: List[tuple] = []  # (step, stage, iteration, unit, mean_score)
        self.history: List[dict] = []
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # -- persistence ---------------------------------------------------
    def _rng_state(self) -> dict:
        return {
            "data": self.data_rng.bit_generator.state,
            "scorer": self.scorer_rng.bit_generator.state,
        }

    def save(self, path) -> None:
        arrays = dict(self.model.state_dict())
        arrays.update(self.opt.state_arrays())
        meta = {
            "step": self.state.step,
            "phase_index": self.state.phase_index,
            "ema_baseline": self.state.ema_baseline,
            "baseline_ready": self.state.baseline_ready,
            "best_val": self.state.best_val,
            "rng_state": self._rng_state(),
            "normalization": {"mean": self.mean, "std": self.std},
            "run_config": self.run_config,
        }
        save_checkpoint(path, arrays, meta)

    def load(self, path) -> None:
        arrays, meta = load_checkpoint(path)
        model_state = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
        self.model.load_state_dict(model_state)
        self.opt.load_state_arrays(arrays)
        self.state.step = int(meta.get("step", 0))
        self.state.phase_index = int(meta.get("phase_index", 0))
        self.state.ema_baseline = float(meta.get("ema_baseline", 0.0))
        self.state.baseline_ready = bool(meta.get("baseline_ready", False))
        self.state.best_val = float(meta.get("best_val", -1.0))
        rng = meta.get("rng_state")
        if rng:
            self.data_rng.bit_generator.state = rng["data"]
            self.scorer_rng.bit_generator.state = rng["scorer"]

    # -- scorer switching -----------------------------------------------
    def reset_stages(self) -> List[ReSetModule]:
        return [s for s in self.model.stages() if isinstance(s, ReSetModule)]

    def set_scorer(self, scorer: ScorerConfig) -> None:
        for stage in self.reset_stages():
            stage.cfg.scorer = scorer
            stage.cfg.scorer.validate_options(stage.pool.n_options)

    # -- single step ------------------------------------------------------
    def train_step(self, phase: Phase, lr: float, ent_factor: float = 1.0) -> dict:
        x, y = self.stream.next_batch()
        self.model.train()
        logits, route = self.model(Tensor(x), rng=self.scorer_rng)
        baseline = self.state.ema_baseline if self.state.baseline_ready else 0.0
        loss, parts = assemble_loss(
            logits, y, route,
            lambda1=phase.lambda1 * ent_factor, lambda2=phase.lambda2 * ent_factor,
            r_skip=phase.r_skip, reinforce_baseline=baseline,
        )
        self.model.zero_grad()
        loss.backward()
        if self.clip_norm:
            clip_gradients(self.named_params.values(), self.clip_norm)
        self.opt.lr = lr
        self.opt.step(self._frozen)
        ce = parts["ce"]
        if self.state.baseline_ready:
            self.state.ema_baseline = (self.BASELINE_DECAY * self.state.ema_baseline
                                       + (1 - self.BASELINE_DECAY) * ce)
        else:
            self.state.ema_baseline = ce
            self.state.baseline_ready = True
        for stage in self.reset_stages():
            stage.scorer_step += 1
        parts["skip_fraction"] = skip_fraction(route) if route.stages else 0.0
        return parts

    # -- evaluation --------------------------------------------------------
    def evaluate(self, data: Optional[LabeledImages] = None, collect_routes: bool = False,
                 threads: int = 1) -> dict:
        data = data if data is not None else self.val_data
        return evaluate_model(self.model, data, self.mean, self.std, batch_size=self.eval_batch,
                              collect_routes=collect_routes, threads=threads)

    def _log_policy(self, step: int) -> None:
        res = self.evaluate(collect_routes=True)
        for sroute in res["routes"].stages:
            w = sroute.weights_array()  # [N, k, m]
            means = w.mean(axis=0)
            for j in range(means.shape[0]):
                for u in range(means.shape[1]):
                    self.policy_log.append((step, sroute.stage_index, j, u, float(means[j, u])))

    # -- phase loop ----------------------------------------------------------
    def run_phase(self, phase: Phase, log_policy: bool = False) -> dict:
        if phase.scorer is not None:
            self.set_scorer(phase.scorer)
        self._frozen = resolve_trainable(self.model, phase.trainable)
        apply_bn_freeze(self.model, self._frozen)
        lr0 = phase.lr if phase.lr is not None else self.base_lr
        budget = phase.steps if phase.steps is not None else phase.max_steps
        phase_start = self.state.step
        best = -1.0
        evals_since_best = 0
        summary = {"phase": phase.name, "start_step": phase_start, "val_acc": None}
        step_in_phase = 0
        while step_in_phase < budget:
            sched_lr = self.lr_schedule.at(self.state.step)
            lr = sched_lr if phase.lr is None else phase.lr
            ent = entropy_decay_factor(step_in_phase, budget) if phase.entropy_decay else 1.0
            parts = self.train_step(phase, lr, ent)
            self.state.step += 1
            step_in_phase += 1
            row = {
                "step": self.state.step, "loss": parts["loss"], "ce": parts["ce"],
                "entropy_term": parts["entropy_term"], "hybrl_term": parts["hybrl_term"],
                "lr": lr, "skip_fraction": parts["skip_fraction"], "val_acc": "",
            }
            if self.eval_every and self.state.step % self.eval_every == 0:
                acc = self.evaluate()["accuracy"]
                row["val_acc"] = acc
                summary["val_acc"] = acc
                if acc > self.state.best_val:
                    self.state.best_val = acc
                if log_policy:
                    self._log_policy(self.state.step)
                if acc > best + 1e-9:
                    best = acc
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                if phase.steps is None and evals_since_best >= phase.converge_window:
                    self.metrics_rows.append(row)
                    break
            self.metrics_rows.append(row)
            if (self.checkpoint_every and self.out_dir
                    and self.state.step % self.checkpoint_every == 0):
                self.save(os.path.join(self.out_dir, f"step{self.state.step:07d}.rrt"))
        summary["end_step"] = self.state.step
        self.history.append(summary)
        return summary

    def run_pipeline(self, spec: PipelineSpec, log_policy: bool = False) -> List[dict]:
        for i, phase in enumerate(spec.phases[self.state.phase_index:],
                                  start=self.state.phase_index):
            self.state.phase_index = i
            self.run_phase(phase, log_policy=log_policy)
        self.state.phase_index = len(spec.phases)
        if self.out_dir:
            self.write_metrics(os.path.join(self.out_dir, "metrics.csv"))
            self.save(os.path.join(self.out_dir, "final.rrt"))
        return self.history

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
            w.writeheader()
            for row in self.metrics_rows:
                w.writerow(row)


def evaluate_model(model: Network, data: LabeledImages, mean, std, *, batch_size: int = 256,
                   collect_routes: bool = False, threads: int = 1) -> dict:
    """Deterministic eval-mode pass: hard scorers realise their noise-free route."""
    model.eval()
    n = len(data)
    shards = [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]

    def run_shard(idx):
        with no_grad():
            x = normalize(data.images[idx], mean, std, dtype=model.dtype_)
            logits, route = model(Tensor(x), rng=None)
        return logits.data, route

    if threads > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run_shard, shards))
    else:
        results = [run_shard(idx) for idx in shards]

    correct = 0
    skip_num, skip_den = 0.0, 0
    all_routes: List[RouteRecord] = []
    for (lg, route), idx in zip(results, shards):
        correct += int((lg.argmax(axis=1) == data.labels[idx]).sum())
        if route.stages:
            skip_num += skip_fraction(route) * len(idx)
            skip_den += len(idx)
            if collect_routes:
                all_routes.append(route)
    out = {
        "accuracy": correct / n if n else 0.0,
        "skip_fraction": skip_num / skip_den if skip_den else 0.0,
        "n": n,
    }
    if collect_routes:
        out["routes"] = merge_routes(all_routes)
    model.train()
    return out


def merge_routes(routes: List[RouteRecord]) -> RouteRecord:
    """Concatenate per-shard route records along the batch axis (detached)."""
    from .reset import IterationRecord, StageRoute

    if len(routes) == 1:
        return routes[0]
    merged = RouteRecord()
    for s_idx in range(len(routes[0].stages)):
        first = routes[0].stages[s_idx]
        stage = StageRoute(first.stage_index, first.n_options, first.zero_index,
                           controller_invoked=first.controller_invoked)
        for j in range(len(first.iterations)):
            w = np.concatenate([r.stages[s_idx].iterations[j].weights.data for r in routes])
            samp = None
            if all(r.stages[s_idx].iterations[j].sampled is not None for r in routes):
                samp = np.concatenate([r.stages[s_idx].iterations[j].sampled for r in routes])
            stage.iterations.append(IterationRecord(Tensor(w), samp, None))
        merged.stages.append(stage)
    return merged
