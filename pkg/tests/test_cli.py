import csv
import json
import math
import shutil
import subprocess
import sys

import pytest
import torch

from lvw import checkpoint as ckpt_io
from lvw.cli import config_text, main, parse_config_text, resolve_config
from lvw.errors import ConfigError

TINY = """\
# small enough to train in seconds
dataset.n_classes = 2
dataset.n_train = 16
dataset.n_test = 8
dataset.resolution = 32
base.epochs = 2
train.epochs = 2
train.project_every = 1
train.stage3_epochs = 1
train.words_per_class = 2
train.channels = 4,8,8
train.k = 2
eval.k = 2
eval.ks = 1,2,3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["finetune-base", "--config", str(cfg), "--out", str(root / "base")]) == 0
    assert main(["train", "--config", str(cfg), "--base", str(root / "base" / "base"),
                 "--out", str(root / "run")]) == 0
    return root


def _args(root, *extra):
    return ["--config", str(root / "tiny.cfg"), "--base", str(root / "base" / "base"),
            "--checkpoint", str(root / "run" / "final"), *extra]


class TestConfig:
    def test_parse_and_override(self):
        values = parse_config_text("a.b = 1  # comment\n\n# only comment\nc = x=y\n")
        assert values == {"a.b": "1", "c": "x=y"}
        cfg = resolve_config({"train.epochs": "5", "eval.qs": "10,20"}, {"train.epochs": "7"})
        assert cfg["train.epochs"] == 7 and cfg["eval.qs"] == (10.0, 20.0)

    def test_round_trip(self):
        cfg = resolve_config(parse_config_text(TINY), {})
        assert resolve_config(parse_config_text(config_text(cfg)), {}) == cfg

    @pytest.mark.parametrize("bad", [{"nope": "1"}, {"train.epochs": "ten"}, {"dataset.resolution": "16"},
                                     {"train.uses_sigmoid": "maybe"}, {"eval.qs": "50,100"},
                                     {"base.checkpoint": "/does/not/exist"}])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            resolve_config({}, bad)


class TestCommands:
    def test_train_outputs(self, workdir):
        run = workdir / "run"
        assert (run / "final" / "manifest.json").is_file()
        assert (run / "trace.csv").is_file()
        manifest = json.loads((run / "run.json").read_text())
        assert manifest["command"] == "train"
        assert set(manifest["inputs"]) == {"dataset", "base_checkpoint"}
        assert manifest["seeds"] == {"dataset": 0, "train": 0}
        assert manifest["outputs"]["final/manifest.json"]
        assert not (run / ".lvw.lock").exists()

    def test_evaluate_schema_and_determinism(self, workdir):
        reports = []
        for name in ("ev1", "ev2"):
            assert main(["evaluate", *_args(workdir, "--out", str(workdir / name))]) == 0
            reports.append((workdir / name / "report.json").read_bytes())
        assert reports[0] == reports[1]
        summary = json.loads(reports[0])
        assert {"mean_iou", "accuracy", "k", "q", "checkpoint_checksum"} <= set(summary)
        assert 0 <= summary["mean_iou"] <= 1 and 0 <= summary["accuracy"] <= 1
        assert summary["checkpoint_checksum"] == ckpt_io.checksum(workdir / "run" / "final")
        assert (workdir / "ev1" / "report.csv").read_bytes() == (workdir / "ev2" / "report.csv").read_bytes()

    def test_sweep_five_rows(self, workdir):
        out = workdir / "sweep"
        assert main(["sweep", *_args(workdir, "--qs", "10,30,50,70,90", "--out", str(out))]) == 0
        with (out / "quantile_sweep.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["q"]) for r in rows] == [10, 30, 50, 70, 90]
        with (out / "topk_sweep.csv").open() as fh:
            ks = list(csv.DictReader(fh))
        assert [int(r["k"]) for r in ks] == [1, 2, 3]
        assert len({r["accuracy"] for r in ks}) == 1

    def test_explain_tree(self, workdir):
        out = workdir / "explain"
        assert main(["explain", *_args(workdir, "--out", str(out))]) == 0
        index = json.loads((out / "index.json").read_text())
        assert len(index["words"]) == 4
        for recs in index["images"].values():
            assert len(recs) == 2
            for r in recs:
                assert (out / r["png"]).is_file()
        m = index["category_similarity"]
        assert len(m) == 2 and all(len(row) == 2 for row in m)

    def test_explain_unseen(self, workdir):
        out = workdir / "unseen"
        assert main(["explain-unseen", *_args(workdir, "--set", "explain.parts=1,3", "--out", str(out))]) == 0
        index = json.loads((out / "index.json").read_text())
        assert len(index["provenance"]) == 2
        assert "not seen during training" in index["note"]
        assert all(p["image_id"].startswith("train_") for p in index["provenance"])

    def test_project(self, workdir):
        out = workdir / "proj"
        assert main(["project", *_args(workdir, "--out", str(out))]) == 0
        c = ckpt_io.load(out / "projected")
        assert c.stage == "projection" and all(p is not None for p in c.provenance)

    def test_manifest_reruns(self, workdir):
        """The saved config alone reproduces the evaluation."""
        first = workdir / "ev1"
        again = workdir / "rerun"
        assert main(["evaluate", "--config", str(first / "config.txt"), "--out", str(again)]) == 0
        assert (first / "report.json").read_bytes() == (again / "report.json").read_bytes()


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        assert main(["evaluate", "--set", "nope=1", "--out", str(tmp_path)]) == 1
        assert main(["train"]) == 1
        assert main(["frobnicate"]) == 1
        assert "error" in capsys.readouterr().err

    def test_data_error(self, tmp_path):
        (tmp_path / "data" / "train").mkdir(parents=True)
        code = main(["finetune-base", "--set", "dataset.source=folder", "--set", f"dataset.path={tmp_path / 'data'}",
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_corrupt_checkpoint_is_data_error(self, workdir, tmp_path):
        bad = tmp_path / "bad"
        shutil.copytree(workdir / "run" / "final", bad)
        blob = sorted((bad / "tensors").iterdir())[0]
        blob.write_bytes(blob.read_bytes()[:-4] + b"\0\0\0\0")
        args = ["evaluate", "--config", str(workdir / "tiny.cfg"), "--base", str(workdir / "base" / "base"),
                "--checkpoint", str(bad), "--out", str(tmp_path / "o")]
        assert main(args) == 2

    def test_numeric_error(self, workdir, tmp_path):
        c = ckpt_io.load(workdir / "run" / "final")
        c.tensors["adapter.0.weight"] = torch.full_like(c.tensors["adapter.0.weight"], math.nan)
        ckpt_io.save(c, tmp_path / "nan")
        args = ["evaluate", "--config", str(workdir / "tiny.cfg"), "--base", str(workdir / "base" / "base"),
                "--checkpoint", str(tmp_path / "nan"), "--out", str(tmp_path / "o")]
        assert main(args) == 3

    def test_locked_output_dir(self, workdir, tmp_path):
        out = tmp_path / "busy"
        out.mkdir()
        (out / ".lvw.lock").write_text("123\n")
        assert main(["evaluate", *_args(workdir, "--out", str(out))]) == 1
        assert (out / ".lvw.lock").exists()

    def test_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "lvw.cli", "evaluate", "--set", "bogus=1",
                               "--out", str(tmp_path)], capture_output=True, text=True)
        assert proc.returncode == 1
        assert "unknown config key" in proc.stderr
