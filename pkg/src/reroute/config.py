"""Declarative run configuration: JSON schema, validation, and builders.

A stored config plus a seed fully determines a run. Validation errors name
the offending field path so CLI users get line-precise feedback.
"""
from __future__ import annotations

import json
import os
from typing import Optional, Tuple

import numpy as np

from . import data as data_mod
from .errors import ConfigError
from .network import Network, build_reset38, build_resnet38, build_shortened
from .optim import LRSchedule
from .selection import ScorerConfig
from .training import Phase, PipelineSpec, Trainer

CONFIG_VERSION = 1

_SCORER_DEFAULTS = {"kind": "softmax", "temperature": 1.0, "k": 1,
                    "temperature_floor": 0.1, "temperature_decay": None}


def _expect(obj: dict, key: str, types, path: str, default="__required__"):
    if key not in obj:
        if default == "__required__":
            raise ConfigError(f"{path}.{key}: required field is missing")
        return default
    v = obj[key]
    if types is not None and not isinstance(v, types):
        tn = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}.{key}: expected {tn}, got {type(v).__name__}")
    return v


def _no_unknown(obj: dict, allowed, path: str):
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")


def load_run_config(path) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    except OSError as e:
        raise ConfigError(f"{path}: {e}")
    return validate_run_config(cfg)


def validate_run_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be an object")
    version = _expect(cfg, "config_version", int, "config")
    if version != CONFIG_VERSION:
        raise ConfigError(
            f"config.config_version: version {version} not supported, this build reads version {CONFIG_VERSION}"
        )
    _no_unknown(cfg, {"config_version", "seed", "out_dir", "data", "model", "scorer",
                      "optimizer", "training", "pipeline", "normalization"}, "config")
    _expect(cfg, "seed", int, "config", 0)
    d = _expect(cfg, "data", dict, "config")
    _no_unknown(d, {"kind", "path", "val_path", "classes", "per_class", "train_limit",
                    "val_fraction", "augment", "seed"}, "config.data")
    kind = _expect(d, "kind", str, "config.data")
    if kind not in ("toy", "cifar10", "raw"):
        raise ConfigError(f"config.data.kind: must be toy, cifar10, or raw, got {kind!r}")
    if kind in ("cifar10", "raw"):
        _expect(d, "path", str, "config.data")

    m = _expect(cfg, "model", dict, "config")
    _no_unknown(m, {"preset", "arch", "kind", "cu_counts", "iter_counts", "width", "classes",
                    "controller", "zero_unit", "lambda1", "lambda2", "r_skip"}, "config.model")
    preset = _expect(m, "preset", str, "config.model")
    if preset not in ("reset38", "resnet38", "shortened"):
        raise ConfigError(f"config.model.preset: unknown preset {preset!r}")
    if preset == "shortened":
        _expect(m, "arch", str, "config.model")
        mkind = _expect(m, "kind", str, "config.model", "reset")
        if mkind not in ("reset", "resnet"):
            raise ConfigError(f"config.model.kind: must be reset or resnet, got {mkind!r}")

    s = _expect(cfg, "scorer", dict, "config", dict(_SCORER_DEFAULTS))
    _no_unknown(s, set(_SCORER_DEFAULTS), "config.scorer")
    try:
        _scorer_from(s)
    except ConfigError as e:
        raise ConfigError(f"config.scorer: {e}")

    o = _expect(cfg, "optimizer", dict, "config", {})
    _no_unknown(o, {"algo", "lr", "momentum", "weight_decay", "clip_norm", "schedule",
                    "beta1", "beta2", "eps"}, "config.optimizer")
    algo = _expect(o, "algo", str, "config.optimizer", "sgd")
    if algo not in ("sgd", "adam"):
        raise ConfigError(f"config.optimizer.algo: must be sgd or adam, got {algo!r}")

    t = _expect(cfg, "training", dict, "config", {})
    _no_unknown(t, {"batch_size", "eval_every", "eval_batch", "checkpoint_every",
                    "threads", "log_policy"}, "config.training")

    phases = _expect(cfg, "pipeline", list, "config")
    if not phases:
        raise ConfigError("config.pipeline: at least one phase is required")
    for i, p in enumerate(phases):
        path = f"config.pipeline[{i}]"
        if not isinstance(p, dict):
            raise ConfigError(f"{path}: each phase must be an object")
        _no_unknown(p, {"name", "steps", "scorer", "trainable", "lambda1", "lambda2",
                        "r_skip", "lr", "entropy_decay", "max_steps", "converge_window"}, path)
        _expect(p, "name", str, path, f"phase{i}")
        steps = p.get("steps", None)
        if steps is not None and (not isinstance(steps, int) or steps < 0):
            raise ConfigError(f"{path}.steps: must be a non-negative integer or null")
        tr = p.get("trainable", "all")
        if not isinstance(tr, (str, list)):
            raise ConfigError(f"{path}.trainable: must be a scope string or list of prefixes")
        if p.get("scorer") is not None:
            _no_unknown(p["scorer"], set(_SCORER_DEFAULTS), f"{path}.scorer")
            try:
                _scorer_from(p["scorer"])
            except ConfigError as e:
                raise ConfigError(f"{path}.scorer: {e}")

    norm = cfg.get("normalization")
    if norm is not None:
        _no_unknown(norm, {"mean", "std"}, "config.normalization")
        for k in ("mean", "std"):
            v = _expect(norm, k, list, "config.normalization")
            if len(v) != 3:
                raise ConfigError(f"config.normalization.{k}: expected 3 per-channel values")
    return cfg


def _scorer_from(s: Optional[dict]) -> ScorerConfig:
    s = dict(_SCORER_DEFAULTS, **(s or {}))
    return ScorerConfig(kind=s["kind"], temperature=float(s["temperature"]), k=int(s["k"]),
                        temperature_floor=float(s["temperature_floor"]),
                        temperature_decay=s["temperature_decay"])


def build_model_from_config(cfg: dict, seed: int, dtype=None) -> Network:
    m = cfg["model"]
    scorer = _scorer_from(cfg.get("scorer"))
    common = dict(width=m.get("width", 16), classes=m.get("classes", 10), seed=seed, dtype=dtype)
    preset = m["preset"]
    if preset == "resnet38":
        return build_resnet38(**common)
    routed = dict(common, scorer=scorer, controller=m.get("controller", "cnn"),
                  zero_unit=m.get("zero_unit", False), lambda1=m.get("lambda1", 0.0),
                  lambda2=m.get("lambda2", 0.0), r_skip=m.get("r_skip", 0.0))
    if preset == "reset38":
        return build_reset38(**routed)
    return build_shortened(m["arch"], m.get("kind", "reset"), cu_counts=m.get("cu_counts"),
                           iter_counts=m.get("iter_counts"), **routed)


def build_pipeline_from_config(cfg: dict) -> PipelineSpec:
    phases = []
    for i, p in enumerate(cfg["pipeline"]):
        scorer = _scorer_from(p["scorer"]) if p.get("scorer") is not None else None
        phases.append(Phase(
            name=p.get("name", f"phase{i}"),
            steps=p.get("steps"),
            scorer=scorer,
            trainable=p.get("trainable", "all"),
            lambda1=float(p.get("lambda1", 0.0)),
            lambda2=float(p.get("lambda2", 0.0)),
            r_skip=p.get("r_skip", 0.0),
            lr=p.get("lr"),
            entropy_decay=bool(p.get("entropy_decay", False)),
            max_steps=int(p.get("max_steps", 20000)),
            converge_window=int(p.get("converge_window", 5)),
        ))
    return PipelineSpec(phases)


def load_dataset(cfg: dict, seed: int) -> Tuple[data_mod.LabeledImages, data_mod.LabeledImages]:
    """Build (train, val) splits per the data section."""
    d = cfg["data"]
    kind = d["kind"]
    if kind == "toy":
        full = data_mod.make_toy_dataset(classes=d.get("classes", 10),
                                         per_class=d.get("per_class", 200),
                                         seed=d.get("seed", seed))
        val = None
    elif kind == "cifar10":
        full, val = data_mod.load_cifar10_binary(d["path"])
    else:
        full = data_mod.load_raw_labeled(d["path"])
        val = data_mod.load_raw_labeled(d["val_path"]) if d.get("val_path") else None

    limit = d.get("train_limit", 0)
    rng = np.random.default_rng(seed)
    if val is None:
        frac = d.get("val_fraction", 0.1)
        perm = rng.permutation(len(full))
        n_val = max(1, int(len(full) * frac))
        val = full.subset(perm[:n_val])
        full = full.subset(perm[n_val:])
    if limit and len(full) > limit:
        perm = rng.permutation(len(full))[:limit]
        full = full.subset(perm)
    return full, val


def make_trainer(cfg: dict, seed: Optional[int] = None, out_dir: Optional[str] = None,
                 dtype=None) -> Trainer:
    seed = cfg.get("seed", 0) if seed is None else seed
    out_dir = out_dir or cfg.get("out_dir")
    train, val = load_dataset(cfg, seed)
    norm = cfg.get("normalization")
    if norm is None:
        mean, std = data_mod.normalization_stats(train)
        cfg = dict(cfg, normalization={"mean": mean, "std": std})
    else:
        mean, std = norm["mean"], norm["std"]
    model = build_model_from_config(cfg, seed=seed, dtype=dtype)
    o = cfg.get("optimizer", {})
    t = cfg.get("training", {})
    sched_cfg = o.get("schedule") or {"kind": "constant"}
    total = sum(p.get("steps") or p.get("max_steps", 20000) for p in cfg["pipeline"])
    schedule = LRSchedule(o.get("lr", 0.1), sched_cfg.get("kind", "constant"),
                          factor=sched_cfg.get("factor", 0.1),
                          milestones=tuple(sched_cfg.get("milestones", (0.5, 0.75))),
                          period=sched_cfg.get("period", 1000), total_steps=total)
    trainer = Trainer(
        model, train, val, mean, std, seed=seed,
        batch_size=t.get("batch_size", 128),
        algo=o.get("algo", "sgd"), lr=o.get("lr", 0.1), momentum=o.get("momentum", 0.9),
        weight_decay=o.get("weight_decay", 1e-4), clip_norm=o.get("clip_norm", 5.0),
        lr_schedule=schedule, eval_every=t.get("eval_every", 100),
        eval_batch=t.get("eval_batch", 256), augment=cfg["data"].get("augment", True),
        out_dir=out_dir, checkpoint_every=t.get("checkpoint_every", 0), run_config=cfg,
    )
    return trainer


def write_effective_config(trainer: Trainer, path) -> None:
    with open(path, "w") as f:
        json.dump(trainer.run_config, f, indent=2, sort_keys=True)
