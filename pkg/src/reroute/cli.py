"""Command-line entry point: training, evaluation, route analysis, data tools.

Exit codes: 0 success, 1 runtime failure, 2 usage/config/format error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from .checkpoint import load_checkpoint
from .config import (build_model_from_config, build_pipeline_from_config, load_run_config,
                     make_trainer, write_effective_config)
from .errors import AnalysisError, CheckpointError, ConfigError, DataFormatError
from .network import cost_report, describe, route_cardinality
from .routes import (class_route_separation, export_routes_jsonl, manhattan_neighbors,
                     route_matrix_from_record, score_std, write_policy_csv)
from .training import evaluate_model

USAGE_ERRORS = (ConfigError, DataFormatError, CheckpointError, AnalysisError)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reroute",
                                description="Dynamic routing over residual unit pools")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run a training pipeline from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--out", default=None)
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="dataset path (RIMG file or CIFAR-10 dir)")
    ev.add_argument("--data-kind", choices=["raw", "cifar10"], default="raw")
    ev.add_argument("--routes", default=None, help="write per-sample route records (JSONL)")
    ev.add_argument("--threads", type=int, default=1)
    ev.add_argument("--limit", type=int, default=0, help="evaluate at most N samples")

    rt = sub.add_parser("routes", help="route analysis on a checkpoint + dataset")
    rsub = rt.add_subparsers(dest="routes_command", required=True)
    for name in ("neighbors", "std", "separation"):
        rp = rsub.add_parser(name)
        rp.add_argument("--checkpoint", required=True)
        rp.add_argument("--data", required=True)
        rp.add_argument("--data-kind", choices=["raw", "cifar10"], default="raw")
        rp.add_argument("--limit", type=int, default=0)
        rp.add_argument("--out", default=None)
        if name == "neighbors":
            rp.add_argument("--image-id", type=int, required=True)
            rp.add_argument("--top", type=int, default=5)
        if name == "separation":
            rp.add_argument("--pairs", type=int, default=10000)
            rp.add_argument("--pair-seed", type=int, default=0)
    rpol = rsub.add_parser("policy")
    rpol.add_argument("--run", required=True, help="training output directory")
    rpol.add_argument("--out", default=None)

    dt = sub.add_parser("data", help="dataset tooling")
    dsub = dt.add_subparsers(dest="data_command", required=True)
    di = dsub.add_parser("inspect")
    di.add_argument("--path", required=True)
    dc = dsub.add_parser("convert")
    dc.add_argument("--in", dest="src", required=True, help="CIFAR-10 binary dir or RIMG file")
    dc.add_argument("--out", required=True, help="output RIMG file (or prefix for cifar10)")
    dc.add_argument("--kind", choices=["cifar10", "raw"], default="cifar10")
    dm = dsub.add_parser("make-toy")
    dm.add_argument("--out", required=True)
    dm.add_argument("--classes", type=int, default=10)
    dm.add_argument("--per-class", type=int, default=500)
    dm.add_argument("--seed", type=int, default=0)

    md = sub.add_parser("model", help="model introspection")
    msub = md.add_subparsers(dest="model_command", required=True)
    mdd = msub.add_parser("describe")
    src = mdd.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--checkpoint")
    return p


# ------------------------------------------------------------- subcommands


def _load_eval_data(path: str, kind: str, limit: int) -> data_mod.LabeledImages:
    if kind == "cifar10":
        _, test = data_mod.load_cifar10_binary(path)
        ds = test
    else:
        ds = data_mod.load_raw_labeled(path)
    if limit and len(ds) > limit:
        ds = ds.subset(np.arange(limit))
    return ds


def _restore(checkpoint_path: str):
    arrays, meta = load_checkpoint(checkpoint_path)
    cfg = meta.get("run_config")
    if not cfg:
        raise CheckpointError(f"{checkpoint_path}: no run config stored; cannot rebuild the model")
    model = build_model_from_config(cfg, seed=cfg.get("seed", 0))
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    norm = meta.get("normalization") or cfg.get("normalization")
    if not norm:
        raise CheckpointError(f"{checkpoint_path}: no normalization statistics stored")
    return model, norm, meta


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    trainer = make_trainer(cfg, seed=args.seed, out_dir=args.out)
    if args.resume:
        trainer.load(args.resume)
    pipeline = build_pipeline_from_config(trainer.run_config)
    log_policy = trainer.run_config.get("training", {}).get("log_policy", False)
    history = trainer.run_pipeline(pipeline, log_policy=log_policy)
    if trainer.out_dir:
        write_effective_config(trainer, os.path.join(trainer.out_dir, "config.json"))
        if trainer.policy_log:
            write_policy_csv(os.path.join(trainer.out_dir, "policy.csv"), trainer.policy_log)
    final = trainer.evaluate()
    print(f"trained {trainer.state.step} steps across {len(history)} phases")
    print(f"val accuracy {final['accuracy']:.4f}  skip_fraction {final['skip_fraction']:.4f}")
    if trainer.out_dir:
        print(f"artifacts in {trainer.out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, norm, _ = _restore(args.checkpoint)
    ds = _load_eval_data(args.data, args.data_kind, args.limit)
    res = evaluate_model(model, ds, norm["mean"], norm["std"], collect_routes=True,
                         threads=args.threads)
    routes = res.get("routes")
    rel = 1.0
    if routes is not None and routes.stages:
        rel = cost_report(model, routes)["relative_time"]
    print(f"accuracy {res['accuracy']:.4f}")
    print(f"skip_fraction {res['skip_fraction']:.4f}")
    print(f"relative_time {rel:.4f}")
    if args.routes and routes is not None:
        n = export_routes_jsonl(args.routes, routes, ds.labels)
        print(f"wrote {n} route lines to {args.routes}")
    return 0


def _route_matrix(args):
    model, norm, _ = _restore(args.checkpoint)
    ds = _load_eval_data(args.data, args.data_kind, args.limit)
    res = evaluate_model(model, ds, norm["mean"], norm["std"], collect_routes=True)
    routes = res.get("routes")
    if routes is None or not routes.stages:
        raise AnalysisError("this model has no routed stages")
    return route_matrix_from_record(routes, ds.labels)


def cmd_routes(args) -> int:
    if args.routes_command == "policy":
        src = os.path.join(args.run, "policy.csv")
        if not os.path.exists(src):
            raise AnalysisError(f"{src} not found; train with training.log_policy=true")
        with open(src) as f:
            content = f.read()
        if args.out:
            with open(args.out, "w") as f:
                f.write(content)
            print(f"wrote {args.out}")
        else:
            sys.stdout.write(content)
        return 0

    rm = _route_matrix(args)
    if args.routes_command == "neighbors":
        result = manhattan_neighbors(rm, args.image_id, args.top)
        for sid, dist in result:
            print(f"{sid}\t{dist:.6f}")
        if args.out:
            with open(args.out, "w") as f:
                json.dump([{"sample_id": s, "distance": d} for s, d in result], f, indent=2)
    elif args.routes_command == "std":
        stds = score_std(rm)
        lines = ["component,std"] + [f"{i},{v:.8f}" for i, v in enumerate(stds)]
        text = "\n".join(lines) + "\n"
        if args.out:
            with open(args.out, "w") as f:
                f.write(text)
            print(f"wrote {args.out} (max std {stds.max():.4f})")
        else:
            sys.stdout.write(text)
    else:
        sep = class_route_separation(rm, pairs=args.pairs, seed=args.pair_seed)
        print(json.dumps(sep, indent=2))
        if args.out:
            with open(args.out, "w") as f:
                json.dump(sep, f, indent=2)
    return 0


def cmd_data(args) -> int:
    if args.data_command == "inspect":
        if os.path.isdir(args.path):
            train, test = data_mod.load_cifar10_binary(args.path)
            print(f"CIFAR-10 binary directory: {len(train)} train records, "
                  f"{len(test)} test records, {train.classes} classes")
            print("train class histogram:", train.class_histogram().tolist())
        else:
            ds = data_mod.load_raw_labeled(args.path)
            print(f"{len(ds)} records, {ds.classes} classes")
            if len(ds):
                print("class histogram:", ds.class_histogram().tolist())
        return 0
    if args.data_command == "convert":
        if args.kind == "cifar10":
            train, test = data_mod.load_cifar10_binary(args.src)
            base = args.out
            data_mod.save_raw_labeled(base + ".train.rimg", train)
            data_mod.save_raw_labeled(base + ".test.rimg", test)
            print(f"wrote {base}.train.rimg ({len(train)}) and {base}.test.rimg ({len(test)})")
        else:
            ds = data_mod.load_raw_labeled(args.src)
            data_mod.save_raw_labeled(args.out, ds)
            print(f"wrote {args.out} ({len(ds)} records)")
        return 0
    ds = data_mod.make_toy_dataset(args.classes, args.per_class, args.seed)
    data_mod.save_raw_labeled(args.out, ds)
    print(f"wrote {args.out}: {len(ds)} records, {ds.classes} classes")
    return 0


def cmd_model(args) -> int:
    if args.config:
        cfg = load_run_config(args.config)
        model = build_model_from_config(cfg, seed=cfg.get("seed", 0))
    else:
        model, _, _ = _restore(args.checkpoint)
    print(describe(model))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "routes":
            return cmd_routes(args)
        if args.command == "data":
            return cmd_data(args)
        if args.command == "model":
            return cmd_model(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
