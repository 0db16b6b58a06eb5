"""Full models: stem, three stages (plain or routed), downsampling, head.

Two downsampling styles exist. Routed builds and the shortened family use an
explicit strided conv between stages; the deep sequential baseline uses the
classic in-block strided transition with a parameter-free shortcut, which is
what keeps its parameter count comparable to the routed build.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from . import ops
from .controller import CnnController, RnnController
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, Linear, Module, ModuleList
from .reset import EVAL_EPS, ComputationalUnit, ReSetConfig, ReSetModule, RouteRecord, StageRoute
from .selection import ScorerConfig
from .tensor import Tensor, default_dtype


class Stem(Module):
    """conv3x3 -> BN -> ReLU -> maxpool(2x2, stride 1, same) keeping 32x32."""

    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, stride=1, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.max_pool2d(ops.relu(self.bn(self.conv(x))), 2, 1, "same")


class Downsample(Module):
    """Strided conv3x3 doubling channels between stages, with BN + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class TransitionBlock(Module):
    """Classic strided residual block; shortcut subsamples and zero-pads channels."""

    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=None):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.extra = out_ch - in_ch

    def __call__(self, x: Tensor) -> Tensor:
        f = self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(x)))))
        sc = ops.pad_channels(ops.subsample2(x), self.extra)
        return ops.add(sc, f)


class PlainStage(Module):
    """Sequential residual blocks: x <- x + F_i(x)."""

    def __init__(self, n_blocks: int, channels: int, rng=None, dtype=None):
        super().__init__()
        self.blocks = ModuleList([ComputationalUnit(channels, rng=rng, dtype=dtype)
                                  for _ in range(n_blocks)])
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = ops.add(x, b(x))
        return x


class ClassicStage(Module):
    """Optional strided transition block followed by plain residual blocks."""

    def __init__(self, n_blocks: int, in_ch: int, out_ch: int, rng=None, dtype=None):
        super().__init__()
        self.transition = TransitionBlock(in_ch, out_ch, rng=rng, dtype=dtype) if in_ch != out_ch else None
        rest = n_blocks - (1 if self.transition is not None else 0)
        self.blocks = ModuleList([ComputationalUnit(out_ch, rng=rng, dtype=dtype) for _ in range(rest)])
        self.channels = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        if self.transition is not None:
            x = self.transition(x)
        for b in self.blocks:
            x = ops.add(x, b(x))
        return x


@dataclass
class StageSpec:
    kind: str  # "resnet" | "reset"
    blocks: int = 0
    reset: Optional[ReSetConfig] = None

    def __post_init__(self):
        if self.kind not in ("resnet", "reset"):
            raise ConfigError(f"stage kind must be resnet or reset, got {self.kind!r}")
        if self.kind == "resnet" and self.blocks < 1:
            raise ConfigError("a resnet stage needs blocks >= 1")
        if self.kind == "reset" and self.reset is None:
            raise ConfigError("a reset stage needs a ReSetConfig")


@dataclass
class NetworkConfig:
    stages: List[StageSpec]
    width: int = 16
    classes: int = 10
    in_channels: int = 3
    input_size: int = 32
    classic_downsample: bool = False

    def __post_init__(self):
        if len(self.stages) != 3:
            raise ConfigError(f"exactly 3 stages required, got {len(self.stages)}")
        if self.classic_downsample and any(s.kind == "reset" for s in self.stages):
            raise ConfigError("classic in-block downsampling applies to sequential builds only")


class Network(Module):
    """Stem -> stage1 -> down -> stage2 -> down -> stage3 -> GAP -> classifier."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=None):
        super().__init__()
        dtype = dtype or default_dtype()
        rng = np.random.default_rng(seed)
        w = cfg.width
        widths = [w, 2 * w, 4 * w]
        self.cfg = cfg
        self.dtype_ = np.dtype(dtype)

        self.stem = Stem(cfg.in_channels, w, rng=rng, dtype=dtype)
        stages = []
        for i, spec in enumerate(cfg.stages):
            ch = widths[i]
            if spec.kind == "reset":
                stages.append(ReSetModule(spec.reset, ch, stage_index=i, rng=rng, dtype=dtype))
            elif cfg.classic_downsample and i > 0:
                stages.append(ClassicStage(spec.blocks, widths[i - 1], ch, rng=rng, dtype=dtype))
            else:
                stages.append(PlainStage(spec.blocks, ch, rng=rng, dtype=dtype))
        self.stage1, self.stage2, self.stage3 = stages
        if not cfg.classic_downsample:
            self.down1 = Downsample(w, 2 * w, rng=rng, dtype=dtype)
            self.down2 = Downsample(2 * w, 4 * w, rng=rng, dtype=dtype)
        self.head = Linear(4 * w, cfg.classes, bias=True, rng=rng, dtype=dtype)

    # -- forward -----------------------------------------------------------
    def stages(self) -> List[Module]:
        return [self.stage1, self.stage2, self.stage3]

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None):
        x = self.stem(x)
        route = RouteRecord()
        for i, stage in enumerate(self.stages()):
            if isinstance(stage, ReSetModule):
                x, sr = stage(x, rng)
                route.stages.append(sr)
            else:
                x = stage(x)
            if i < 2 and not self.cfg.classic_downsample:
                x = (self.down1 if i == 0 else self.down2)(x)
        logits = self.head(ops.global_avg_pool(x))
        return logits, route

    # -- cost model ----------------------------------------------------------
    def spatial_sizes(self) -> List[int]:
        s = self.cfg.input_size
        return [s, s // 2, s // 4]

    def mac_profile(self) -> dict:
        """Analytic per-sample multiply-accumulate counts of every component."""
        cfg = self.cfg
        sizes = self.spatial_sizes()
        w = cfg.width
        widths = [w, 2 * w, 4 * w]
        prof = {
            "stem": self.stem.conv.macs(sizes[0], sizes[0]),
            "head": self.head.macs(),
            "downsample": 0,
            "stages": [],
        }
        if not cfg.classic_downsample:
            prof["downsample"] = (self.down1.conv.macs(sizes[1], sizes[1])
                                  + self.down2.conv.macs(sizes[2], sizes[2]))
        for i, stage in enumerate(self.stages()):
            r = sizes[i]
            entry = {"spatial": r, "channels": widths[i]}
            if isinstance(stage, ReSetModule):
                entry["kind"] = "reset"
                entry["unit_macs"] = stage.pool.units[0].macs(r, r)
                entry["controller_macs"] = stage.controller.invocation_macs(r, r)
                entry["iterations"] = stage.cfg.n_iterations
                entry["n_units"] = stage.pool.n_units
            else:
                entry["kind"] = "resnet"
                blocks = list(stage.blocks)
                entry["block_macs"] = [b.macs(r, r) for b in blocks]
                if isinstance(stage, ClassicStage) and stage.transition is not None:
                    t = stage.transition
                    entry["block_macs"].insert(0, t.conv1.macs(r, r) + t.conv2.macs(r, r))
            prof["stages"].append(entry)
        return prof

    def total_macs(self) -> int:
        """Full sequential evaluation cost (soft routed stages evaluate all units)."""
        prof = self.mac_profile()
        total = prof["stem"] + prof["head"] + prof["downsample"]
        for e in prof["stages"]:
            if e["kind"] == "reset":
                total += e["iterations"] * (e["n_units"] * e["unit_macs"] + e["controller_macs"])
            else:
                total += sum(e["block_macs"])
        return total


def sequential_baseline_macs(model: Network) -> int:
    """Cost of the iteration-matched sequential twin: each routed stage replaced
    by one unit evaluation per iteration, controllers removed."""
    prof = model.mac_profile()
    total = prof["stem"] + prof["head"] + prof["downsample"]
    for e in prof["stages"]:
        if e["kind"] == "reset":
            total += e["iterations"] * e["unit_macs"]
        else:
            total += sum(e["block_macs"])
    return total


def cost_report(model: Network, route: RouteRecord, baseline_macs: Optional[int] = None) -> dict:
    """Average per-sample MACs actually spent for `route`, and time relative
    to a sequential baseline (iteration-matched twin unless given explicitly).

    Executed units are read off the recorded weights; skipped units cost 0.
    Controller cost is charged per invocation and only when the controller
    actually ran (forced policies bypass it).
    """
    prof = model.mac_profile()
    total = float(prof["stem"] + prof["head"] + prof["downsample"])
    reset_stages = [e for e in prof["stages"] if e["kind"] == "reset"]
    for e in prof["stages"]:
        if e["kind"] == "resnet":
            total += sum(e["block_macs"])
    if len(reset_stages) != len(route.stages):
        raise ConfigError(
            f"route has {len(route.stages)} routed stages, model has {len(reset_stages)}"
        )
    for entry, sroute in zip(reset_stages, route.stages):
        n_real = entry["n_units"]
        for rec in sroute.iterations:
            frac_executed = (rec.weights.data[:, :n_real] > EVAL_EPS).mean(axis=0).sum()
            total += float(frac_executed) * entry["unit_macs"]
        if sroute.controller_invoked:
            total += len(sroute.iterations) * entry["controller_macs"]
    if baseline_macs is None:
        baseline_macs = sequential_baseline_macs(model)
    return {
        "mac_count": total,
        "baseline_macs": float(baseline_macs),
        "relative_time": total / float(baseline_macs),
    }


def route_cardinality(model: Network) -> int:
    """Number of distinct hard routes an input can take through the model."""
    total = 1
    for stage in model.stages():
        if isinstance(stage, ReSetModule):
            total *= stage.pool.n_options ** stage.cfg.n_iterations
    return total


# ------------------------------------------------------------------ builders


def build_reset38(scorer: Optional[ScorerConfig] = None, width: int = 16, classes: int = 10,
                  zero_unit: bool = False, controller: str = "cnn", seed: int = 0,
                  dtype=None, lambda1: float = 0.0, lambda2: float = 0.0,
                  r_skip: Union[float, Sequence[float]] = 0.0) -> Network:
    """Three routed stages of 5 units iterated 5 times each."""
    scorer = scorer or ScorerConfig()
    stages = [StageSpec("reset", reset=ReSetConfig(
        n_units=5, n_iterations=5, scorer=scorer, controller_kind=controller,
        zero_unit=zero_unit, lambda1=lambda1, lambda2=lambda2, r_skip=r_skip,
    )) for _ in range(3)]
    return Network(NetworkConfig(stages=stages, width=width, classes=classes), seed=seed, dtype=dtype)


def build_resnet38(width: int = 16, classes: int = 10, seed: int = 0, dtype=None) -> Network:
    """Classic 6-block-per-stage sequential baseline (3*6*2 + 2 = 38 layers)."""
    stages = [StageSpec("resnet", blocks=6) for _ in range(3)]
    return Network(NetworkConfig(stages=stages, width=width, classes=classes,
                                 classic_downsample=True), seed=seed, dtype=dtype)


def build_shortened(arch: str, kind: str, cu_counts: Optional[Sequence[int]] = None,
                    iter_counts: Optional[Sequence[int]] = None,
                    scorer: Optional[ScorerConfig] = None, width: int = 16, classes: int = 10,
                    controller: str = "cnn", zero_unit: bool = False, seed: int = 0,
                    dtype=None, lambda1: float = 0.0, lambda2: float = 0.0,
                    r_skip: Union[float, Sequence[float]] = 0.0) -> Network:
    """Shortened three-stage build from an "n1-n2-n3" block string.

    kind="resnet" gives sequential stages. kind="reset" turns every stage
    with more than one block (or an explicit pool override) into a routed
    stage with cu_counts[i] units and iter_counts[i] iterations (both default
    to the arch numbers); single-block stages stay sequential.
    """
    try:
        blocks = [int(p) for p in arch.split("-")]
    except ValueError:
        raise ConfigError(f"arch must look like '1-1-5', got {arch!r}")
    if len(blocks) != 3 or any(b < 1 for b in blocks):
        raise ConfigError(f"arch must name 3 positive block counts, got {arch!r}")
    if kind not in ("resnet", "reset"):
        raise ConfigError(f"kind must be resnet or reset, got {kind!r}")
    scorer = scorer or ScorerConfig()
    cu_counts = list(cu_counts) if cu_counts is not None else list(blocks)
    iter_counts = list(iter_counts) if iter_counts is not None else list(blocks)
    if len(cu_counts) != 3 or len(iter_counts) != 3:
        raise ConfigError("cu_counts and iter_counts must have 3 entries")

    stages = []
    for i in range(3):
        routed = kind == "reset" and (cu_counts[i] > 1 or iter_counts[i] > 1)
        if routed:
            stages.append(StageSpec("reset", reset=ReSetConfig(
                n_units=cu_counts[i], n_iterations=iter_counts[i], scorer=scorer,
                controller_kind=controller, zero_unit=zero_unit,
                lambda1=lambda1, lambda2=lambda2, r_skip=r_skip,
            )))
        else:
            stages.append(StageSpec("resnet", blocks=blocks[i]))
    return Network(NetworkConfig(stages=stages, width=width, classes=classes), seed=seed, dtype=dtype)


def describe(model: Network) -> str:
    """Human-readable per-stage shapes, parameter counts, and MACs."""
    prof = model.mac_profile()
    lines = []
    lines.append(f"input: {model.cfg.in_channels}x{model.cfg.input_size}x{model.cfg.input_size}, "
                 f"classes: {model.cfg.classes}, dtype: {model.dtype_.name}")
    lines.append(f"stem: conv3x3 -> {model.cfg.width} ch @ {prof['stem']:,} MACs")
    for i, e in enumerate(prof["stages"]):
        stage = model.stages()[i]
        params = stage.param_count()
        if e["kind"] == "reset":
            per_iter = e["n_units"] * e["unit_macs"] + e["controller_macs"]
            lines.append(
                f"stage{i + 1}: reset {e['n_units']} units x {e['iterations']} iters, "
                f"{e['channels']} ch @ {e['spatial']}x{e['spatial']}, params {params:,}, "
                f"soft MACs {e['iterations'] * per_iter:,}"
            )
        else:
            lines.append(
                f"stage{i + 1}: resnet {len(e['block_macs'])} blocks, {e['channels']} ch @ "
                f"{e['spatial']}x{e['spatial']}, params {params:,}, MACs {sum(e['block_macs']):,}"
            )
    lines.append(f"downsample MACs: {prof['downsample']:,}")
    lines.append(f"head: {4 * model.cfg.width} -> {model.cfg.classes} @ {prof['head']:,} MACs")
    lines.append(f"total params: {model.param_count():,}")
    lines.append(f"total soft MACs: {model.total_macs():,}")
    lines.append(f"hard route space: {route_cardinality(model):,}")
    return "\n".join(lines)
