import csv
import json
import os

import numpy as np
import pytest

from reroute import cli
from reroute.data import load_raw_labeled, make_toy_dataset, save_raw_labeled


def smoke_config(out_dir, steps=12, lambda1=0.0, scorer_kind="softmax"):
    return {
        "config_version": 1,
        "seed": 5,
        "out_dir": str(out_dir),
        "data": {"kind": "toy", "classes": 4, "per_class": 24, "val_fraction": 0.25,
                 "augment": False},
        "model": {"preset": "shortened", "arch": "2-1-1", "kind": "reset", "width": 8,
                  "classes": 4},
        "scorer": {"kind": scorer_kind},
        "optimizer": {"algo": "sgd", "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0001},
        "training": {"batch_size": 16, "eval_every": 6, "eval_batch": 64},
        "pipeline": [{"name": "main", "steps": steps, "trainable": "all",
                      "lambda1": lambda1, "lambda2": lambda1}],
    }


def write_config(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestArgparseBasics:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["--help"])
        assert e.value.code == 0
        assert "reroute" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["train", "--config", "x.json", "--bogus-flag"])
        assert e.value.code == 2

    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as e:
            cli.main([])
        assert e.value.code == 2


class TestConfigValidation:
    def test_invalid_json_names_position(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{"config_version": 1,,}')
        assert cli.main(["train", "--config", str(p)]) == 2
        assert "line 1" in capsys.readouterr().err

    def test_missing_field_names_path(self, tmp_path, capsys):
        cfg = smoke_config(tmp_path / "o")
        del cfg["data"]["kind"]
        assert cli.main(["train", "--config", str(write_config(tmp_path, cfg))]) == 2
        assert "config.data.kind" in capsys.readouterr().err

    def test_unknown_field_rejected(self, tmp_path, capsys):
        cfg = smoke_config(tmp_path / "o")
        cfg["model"]["zzz"] = 1
        assert cli.main(["train", "--config", str(write_config(tmp_path, cfg))]) == 2
        assert "config.model" in capsys.readouterr().err

    def test_older_schema_version_rejected_with_message(self, tmp_path, capsys):
        cfg = smoke_config(tmp_path / "o")
        cfg["config_version"] = 0
        assert cli.main(["train", "--config", str(write_config(tmp_path, cfg))]) == 2
        assert "version 0" in capsys.readouterr().err

    def test_missing_data_path_exit_two(self, tmp_path, capsys):
        cfg = smoke_config(tmp_path / "o")
        cfg["data"] = {"kind": "raw", "path": str(tmp_path / "absent.rimg")}
        assert cli.main(["train", "--config", str(write_config(tmp_path, cfg))]) == 2

    def test_bad_scorer_kind_path(self, tmp_path, capsys):
        cfg = smoke_config(tmp_path / "o")
        cfg["scorer"]["kind"] = "nope"
        assert cli.main(["train", "--config", str(write_config(tmp_path, cfg))]) == 2
        assert "config.scorer" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One small training run shared by the CLI round-trip tests."""
    root = tmp_path_factory.mktemp("cli_run")
    out = root / "run"
    cfg = smoke_config(out, steps=14, lambda1=0.05)
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    code = cli.main(["train", "--config", str(cfg_path)])
    assert code == 0
    eval_set = make_toy_dataset(classes=4, per_class=10, seed=77)
    eval_path = root / "eval.rimg"
    save_raw_labeled(eval_path, eval_set)
    return {"root": root, "out": out, "cfg_path": cfg_path, "eval_path": eval_path}


class TestTrainCli:
    def test_outputs_exist_and_metrics_nonempty(self, trained_run):
        out = trained_run["out"]
        assert (out / "final.rrt").exists()
        assert (out / "config.json").exists()
        with open(out / "metrics.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 14
        assert list(rows[0]) == ["step", "loss", "ce", "entropy_term", "hybrl_term",
                                 "lr", "skip_fraction", "val_acc"]
        assert any(r["val_acc"] for r in rows)

    def test_effective_config_records_normalization(self, trained_run):
        stored = json.loads((trained_run["out"] / "config.json").read_text())
        assert "normalization" in stored
        assert len(stored["normalization"]["mean"]) == 3

    def test_resume_continues_step_counter(self, trained_run, capsys):
        code = cli.main(["train", "--config", str(trained_run["cfg_path"]),
                         "--out", str(trained_run["root"] / "resumed"),
                         "--resume", str(trained_run["out"] / "final.rrt")])
        assert code == 0
        text = capsys.readouterr().out
        assert "trained 14 steps" in text  # counter restored, no extra phases re-run

    def test_rerun_with_same_seed_reproduces_metrics(self, trained_run, tmp_path):
        cfg = json.loads(trained_run["cfg_path"].read_text())
        cfg["out_dir"] = str(tmp_path / "again")
        p = tmp_path / "again.json"
        p.write_text(json.dumps(cfg))
        assert cli.main(["train", "--config", str(p)]) == 0
        a = (trained_run["out"] / "metrics.csv").read_text()
        b = (tmp_path / "again" / "metrics.csv").read_text()
        assert a == b


class TestEvalCli:
    def test_eval_prints_metrics_and_routes(self, trained_run, tmp_path, capsys):
        routes_path = tmp_path / "routes.jsonl"
        code = cli.main(["eval", "--checkpoint", str(trained_run["out"] / "final.rrt"),
                         "--data", str(trained_run["eval_path"]),
                         "--routes", str(routes_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "accuracy" in out and "skip_fraction" in out and "relative_time" in out
        n_eval = 40
        lines = routes_path.read_text().strip().split("\n")
        assert len(lines) == n_eval * 2  # one routed stage, 2 iterations
        json.loads(lines[0])

    def test_corrupt_checkpoint_magic_exit_two(self, trained_run, tmp_path, capsys):
        src = (trained_run["out"] / "final.rrt").read_bytes()
        bad = tmp_path / "bad.rrt"
        bad.write_bytes(b"ZZZZ" + src[4:])
        code = cli.main(["eval", "--checkpoint", str(bad),
                         "--data", str(trained_run["eval_path"])])
        assert code == 2
        assert "magic" in capsys.readouterr().err


class TestRoutesCli:
    def test_neighbors_output(self, trained_run, capsys):
        code = cli.main(["routes", "neighbors", "--checkpoint",
                         str(trained_run["out"] / "final.rrt"),
                         "--data", str(trained_run["eval_path"]),
                         "--image-id", "3", "--top", "5"])
        assert code == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 5
        sid, dist = lines[0].split("\t")
        assert sid != "3" and float(dist) >= 0

    def test_std_csv(self, trained_run, tmp_path, capsys):
        out_csv = tmp_path / "std.csv"
        code = cli.main(["routes", "std", "--checkpoint",
                         str(trained_run["out"] / "final.rrt"),
                         "--data", str(trained_run["eval_path"]), "--out", str(out_csv)])
        assert code == 0
        lines = out_csv.read_text().strip().split("\n")
        assert lines[0] == "component,std"
        assert len(lines) == 1 + 2 * 2  # iterations x options for the routed stage

    def test_separation_json(self, trained_run, capsys):
        code = cli.main(["routes", "separation", "--checkpoint",
                         str(trained_run["out"] / "final.rrt"),
                         "--data", str(trained_run["eval_path"]), "--pairs", "500"])
        assert code == 0
        data = json.loads(capsys.readouterr().out)
        assert {"intra_class_mean_l1", "inter_class_mean_l1", "ratio"} <= set(data)


class TestDataCli:
    def test_make_toy_deterministic(self, tmp_path, capsys):
        a, b = tmp_path / "a.rimg", tmp_path / "b.rimg"
        assert cli.main(["data", "make-toy", "--out", str(a), "--classes", "3",
                         "--per-class", "7", "--seed", "11"]) == 0
        assert cli.main(["data", "make-toy", "--out", str(b), "--classes", "3",
                         "--per-class", "7", "--seed", "11"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_inspect_reports_counts(self, tmp_path, capsys):
        p = tmp_path / "t.rimg"
        cli.main(["data", "make-toy", "--out", str(p), "--classes", "5", "--per-class", "4"])
        capsys.readouterr()
        assert cli.main(["data", "inspect", "--path", str(p)]) == 0
        out = capsys.readouterr().out
        assert "20 records, 5 classes" in out

    def test_convert_raw_roundtrip(self, tmp_path, capsys):
        src = tmp_path / "src.rimg"
        cli.main(["data", "make-toy", "--out", str(src), "--classes", "2", "--per-class", "3"])
        dst = tmp_path / "dst.rimg"
        assert cli.main(["data", "convert", "--kind", "raw", "--in", str(src),
                         "--out", str(dst)]) == 0
        assert src.read_bytes() == dst.read_bytes()

    def test_inspect_missing_file_exit_two(self, tmp_path):
        assert cli.main(["data", "inspect", "--path", str(tmp_path / "nope.rimg")]) in (1, 2)


class TestModelCli:
    def test_describe_from_config(self, trained_run, capsys):
        code = cli.main(["model", "describe", "--config", str(trained_run["cfg_path"])])
        assert code == 0
        out = capsys.readouterr().out
        assert "stage1: reset 2 units x 2 iters" in out
        assert "total params" in out

    def test_describe_from_checkpoint(self, trained_run, capsys):
        code = cli.main(["model", "describe", "--checkpoint",
                         str(trained_run["out"] / "final.rrt")])
        assert code == 0
        assert "hard route space" in capsys.readouterr().out
