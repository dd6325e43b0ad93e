import json
import re
import time

import numpy as np
import pytest

from conftest import make_blob_dataset
from hebb.checkpoint import save_checkpoint
from hebb.cli import main
from hebb.config import load_plan, parse_plan
from hebb.dataio import write_idx
from hebb.errors import ConfigError
from hebb.tensorcore import RngState
from hebb.viz import read_metrics


def write_dataset_files(tmp_path, count=64, classes=4, side=12, seed=0,
                        prefix="train", dataset=None):
    ds = dataset if dataset is not None else make_blob_dataset(
        count, classes, shape=(1, side, side), seed=seed)
    images_u8 = np.round(ds.images[:, 0] * 255).astype(np.uint8)
    images_path = tmp_path / f"{prefix}-images-idx3-ubyte"
    labels_path = tmp_path / f"{prefix}-labels-idx1-ubyte"
    write_idx(images_path, images_u8)
    write_idx(labels_path, ds.labels.astype(np.uint8))
    return images_path, labels_path


def smoke_config(tmp_path, *, seed=0, hebb_epochs=2, sup_epochs=2):
    # one distribution (shared class templates), disjoint train/test halves
    full = make_blob_dataset(96, 4, shape=(1, 12, 12), seed=1)
    train = write_dataset_files(tmp_path, prefix="train",
                                dataset=full.subset(np.arange(64)))
    test = write_dataset_files(tmp_path, prefix="t10k",
                               dataset=full.subset(np.arange(64, 96)))
    cfg = {
        "seed": seed,
        "data": {
            "train_images": str(train[0]),
            "train_labels": str(train[1]),
            "test_images": str(test[0]),
            "test_labels": str(test[1]),
        },
        "model": {
            "input_shape": [1, 12, 12],
            "num_classes": 4,
            "layers": [
                {"name": "conv1", "kind": "conv2d", "filters": 8,
                 "kernel": [3, 3], "stride": 1},
                {"name": "bn1", "kind": "batchnorm2d"},
                {"name": "act1", "kind": "repu", "power": 1},
                {"name": "pool1", "kind": "maxpool2d", "kernel": [2, 2],
                 "stride": 2},
                {"name": "flat", "kind": "flatten"},
                {"name": "out", "kind": "linear", "units": 4, "bias": True},
            ],
        },
        "hebbian": {
            "rules": {"conv1": {"p": 4, "k": 4, "delta": 0.4}},
            "lr": 0.04,
            "epochs": hebb_epochs,
            "batch_size": 500,
            "freeze_after": True,
        },
        "supervised": {
            "supervised_from": "bn1",
            "lr": 0.005,
            "epochs": sup_epochs,
            "batch_size": 16,
            "plateau": {"factor": 0.5, "patience": 3},
            "early_stop": {"patience": 5},
            "monitor": "loss",
        },
        "outputs": {
            "weight_grid": {"layer": "conv1", "every": 1, "rows": 3,
                            "cols": 3, "count": 8},
            "layer_stats": True,
        },
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def metrics_without_seconds(path):
    return [(r.phase, r.epoch, r.lr, r.loss, r.accuracy)
            for r in read_metrics(path)]


class TestTrain:
    def test_smoke_run_produces_artifacts(self, tmp_path, capsys):
        config = smoke_config(tmp_path)
        out = tmp_path / "run"
        t0 = time.perf_counter()
        assert main(["train", "--config", str(config), "--out", str(out),
                     "--threads", "2"]) == 0
        assert time.perf_counter() - t0 < 60  # smoke budget
        assert (out / "hebbian.ckpt").exists()
        assert (out / "final.ckpt").exists()
        assert (out / "layer_stats.csv").exists()
        assert (out / "weights_conv1_epoch0002.pgm").exists()
        rows = read_metrics(out / "metrics.csv")
        assert [r.phase for r in rows].count("hebbian") == 2
        assert any(r.phase == "supervised" for r in rows)
        printed = capsys.readouterr().out
        assert re.search(r"test loss \d+\.\d{6} accuracy \d+\.\d{6}", printed)

    def test_missing_dataset_exits_2_without_outputs(self, tmp_path, capsys):
        config = smoke_config(tmp_path)
        cfg = json.loads(config.read_text())
        cfg["data"]["train_images"] = str(tmp_path / "nonexistent")
        config.write_text(json.dumps(cfg))
        out = tmp_path / "run2"
        assert main(["train", "--config", str(config),
                     "--out", str(out)]) == 2
        assert not out.exists()  # validation precedes any output
        assert "train_images" in capsys.readouterr().err

    def test_invalid_config_field_exits_2(self, tmp_path, capsys):
        config = smoke_config(tmp_path)
        cfg = json.loads(config.read_text())
        cfg["hebbian"]["batch_size"] = "wat"
        config.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(config),
                     "--out", str(tmp_path / "x")]) == 2
        assert "hebbian.batch_size" in capsys.readouterr().err

    def test_deterministic_reruns_and_thread_counts(self, tmp_path):
        config = smoke_config(tmp_path)
        digests = []
        for name, threads in (("a", "1"), ("b", "1"), ("c", "2")):
            out = tmp_path / name
            assert main(["train", "--config", str(config), "--out", str(out),
                         "--threads", threads]) == 0
            digests.append((
                (out / "hebbian.ckpt").read_bytes(),
                (out / "final.ckpt").read_bytes(),
                metrics_without_seconds(out / "metrics.csv"),
            ))
        assert digests[0] == digests[1]  # same seed, same thread count
        assert digests[0] == digests[2]  # same seed, different thread count

    def test_holdout_split_monitors_holdout(self, tmp_path):
        config = smoke_config(tmp_path)
        cfg = json.loads(config.read_text())
        cfg["data"]["holdout_fraction"] = 0.25
        config.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        assert main(["train", "--config", str(config), "--out", str(out),
                     "--threads", "1"]) == 0
        meta = json.loads((out / "run_meta.json").read_text())
        assert meta["train_samples"] == 48 and meta["eval_samples"] == 16

    def test_negative_seed_rejected(self, tmp_path, capsys):
        config = smoke_config(tmp_path)
        assert main(["train", "--config", str(config),
                     "--out", str(tmp_path / "x"), "--seed", "-1"]) == 2
        assert "seed" in capsys.readouterr().err

    def test_seed_override_changes_results(self, tmp_path):
        config = smoke_config(tmp_path)
        outs = []
        for name, seed in (("s1", "7"), ("s2", "8")):
            out = tmp_path / name
            assert main(["train", "--config", str(config), "--out", str(out),
                         "--seed", seed, "--threads", "1"]) == 0
            outs.append((out / "final.ckpt").read_bytes())
        assert outs[0] != outs[1]


class TestEval:
    def test_eval_reproduces_train_reported_accuracy(self, tmp_path, capsys):
        config = smoke_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", str(config), "--out", str(out),
              "--threads", "1"])
        train_out = capsys.readouterr().out
        reported = re.search(r"test loss (\S+) accuracy (\S+)", train_out)
        assert main(["eval", "--checkpoint", str(out / "final.ckpt"),
                     "--config", str(config), "--threads", "1"]) == 0
        eval_out = capsys.readouterr().out
        evaluated = re.search(r"loss (\S+) accuracy (\S+)", eval_out)
        assert evaluated.group(1) == reported.group(1)
        assert evaluated.group(2) == reported.group(2)

    def test_corrupted_checkpoint_exits_2(self, tmp_path, capsys):
        config = smoke_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", str(config), "--out", str(out),
              "--threads", "1"])
        blob = bytearray((out / "final.ckpt").read_bytes())
        blob[-20] ^= 0x01
        (out / "final.ckpt").write_bytes(bytes(blob))
        assert main(["eval", "--checkpoint", str(out / "final.ckpt"),
                     "--config", str(config)]) == 2

    def test_wrong_geometry_exits_2(self, tmp_path, capsys):
        config = smoke_config(tmp_path)
        out = tmp_path / "run"
        out.mkdir()
        save_checkpoint({"conv1.weight": np.zeros((2, 2))}, out / "bad.ckpt")
        assert main(["eval", "--checkpoint", str(out / "bad.ckpt"),
                     "--config", str(config)]) == 2
        err = capsys.readouterr().err
        assert "conv1.weight" in err or "missing" in err


class TestBench:
    def test_report_structure_and_warmup_exclusion(self, tmp_path, capsys):
        images, labels = write_dataset_files(tmp_path, 96, 4, side=8)
        csv_out = tmp_path / "bench.csv"
        assert main(["bench", "--units", "16", "--batch-size", "32",
                     "--epochs", "2", "--threads", "1",
                     "--images", str(images), "--labels", str(labels),
                     "--out", str(csv_out)]) == 0
        printed = capsys.readouterr().out
        assert "(+1 warm-up)" in printed
        assert "mean seconds/epoch" in printed
        lines = csv_out.read_text().strip().split("\n")
        assert lines[0] == "units,batch_size,threads,epoch,seconds"
        assert len(lines) == 4  # 2 epochs + mean
        assert lines[-1].split(",")[3] == "mean"

    def test_thread_counts_identical_weights(self, tmp_path):
        images, labels = write_dataset_files(tmp_path, 96, 4, side=8)
        weights = []
        for name, threads in (("w1.ckpt", "1"), ("w2.ckpt", "2")):
            path = tmp_path / name
            assert main(["bench", "--units", "16", "--batch-size", "32",
                         "--epochs", "1", "--threads", threads,
                         "--images", str(images), "--labels", str(labels),
                         "--weights-out", str(path)]) == 0
            weights.append(path.read_bytes())
        assert weights[0] == weights[1]

    def test_missing_dataset_exits_2(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("HEBB_DATA_DIR", raising=False)
        assert main(["bench", "--units", "8"]) == 2


class TestViz:
    def _trained_checkpoint(self, tmp_path):
        rng = RngState(0)
        weights = {"conv1.weight": rng.normal((25, 1, 5, 5)),
                   "out.weight": rng.normal((16, 144))}
        path = tmp_path / "w.ckpt"
        save_checkpoint(weights, path)
        return path

    def test_conv_grid_geometry(self, tmp_path):
        ckpt = self._trained_checkpoint(tmp_path)
        out = tmp_path / "grid.pgm"
        assert main(["viz", "--checkpoint", str(ckpt), "--layer", "conv1",
                     "--grid", "5x5", "--out", str(out)]) == 0
        from hebb.viz import read_pgm
        assert read_pgm(out).shape == (5 * 5 + 4, 5 * 5 + 4)

    def test_linear_grid_inferred_square(self, tmp_path):
        ckpt = self._trained_checkpoint(tmp_path)
        out = tmp_path / "lin.pgm"
        assert main(["viz", "--checkpoint", str(ckpt), "--layer", "out",
                     "--grid", "4x4", "--out", str(out)]) == 0
        from hebb.viz import read_pgm
        assert read_pgm(out).shape == (4 * 12 + 3, 4 * 12 + 3)

    def test_deterministic_bytes_given_seed(self, tmp_path):
        ckpt = self._trained_checkpoint(tmp_path)
        a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
        for out in (a, b):
            assert main(["viz", "--checkpoint", str(ckpt), "--layer", "conv1",
                         "--grid", "3x3", "--count", "9", "--seed", "5",
                         "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_layer_exits_2(self, tmp_path, capsys):
        ckpt = self._trained_checkpoint(tmp_path)
        assert main(["viz", "--checkpoint", str(ckpt), "--layer", "nope",
                     "--out", str(tmp_path / "x.pgm")]) == 2


class TestConfigParsing:
    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown field"):
            parse_plan({"data": {}, "model": {}, "bogus": 1})

    def test_paper_scale_config_parses(self):
        plan = load_plan("configs/fashion_cnn.json")
        assert plan.hebbian.rules["conv1"].p == 4
        assert plan.hebbian.rules["conv1"].k == 4
        assert plan.hebbian.rules["conv1"].delta == 0.4
        assert plan.hebbian.lr == 0.04
        assert plan.hebbian.epochs == 100
        assert plan.hebbian.batch_size == 1000
        assert plan.supervised.lr == 0.001
        assert plan.supervised.epochs == 100
        assert plan.supervised.batch_size == 256
        conv = next(c for c in plan.layer_configs if c["name"] == "conv1")
        assert conv["filters"] == 400 and conv["kernel"] == (5, 5)
        repu = next(c for c in plan.layer_configs if c["kind"] == "repu")
        assert repu["power"] == 1

    def test_desk_scale_config_parses(self):
        plan = load_plan("configs/fashion_cnn_desk.json")
        assert plan.data.train_subset == 10000
        conv = next(c for c in plan.layer_configs if c["name"] == "conv1")
        assert conv["filters"] == 100
        assert plan.hebbian.epochs == 20
        assert plan.supervised.epochs == 30

    def test_rule_on_unrulable_layer_rejected(self, tmp_path):
        config = smoke_config(tmp_path)
        cfg = json.loads(config.read_text())
        cfg["hebbian"]["rules"] = {"pool1": {}}
        with pytest.raises(ConfigError, match="pool1"):
            parse_plan(cfg)
