import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from cpgan import cli
from cpgan import gradcheck as gc
from cpgan import tensor as T
from cpgan.trainer import TrainConfig


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out", d, "--count", 20, "--seed", 1, "--size", 16) == 0
    return d


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text(TrainConfig(epochs=1, assistant_epochs=1, warmup_epochs=1).dumps())
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestGenData:
    def test_empty(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "e", "--count", 0) == 0
        assert (tmp_path / "e" / "manifest.txt").read_text() == ""

    def test_idempotent(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / name, "--count", 5, "--seed", 3, "--size", 16) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_bad_size(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path / "x", "--size", 60) == 1
        assert "16" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "x", "--colour", "red") == 1


class TestTrainEval:
    def test_missing_key(self, tmp_path, dataset, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("".join(line + "\n" for line in TrainConfig().dumps().splitlines() if "lr" not in line))
        assert run("train", "--config", cfg, "--data", dataset, "--out", tmp_path / "r") == 1
        assert "'lr'" in capsys.readouterr().err

    def test_smoke_and_rerun(self, tmp_path, dataset, config):
        t0 = time.perf_counter()
        assert run("train", "--config", config, "--data", dataset, "--out", tmp_path / "r1") == 0
        assert time.perf_counter() - t0 < 60
        assert run("train", "--config", config, "--data", dataset, "--out", tmp_path / "r2") == 0
        assert (tmp_path / "r1" / "losses.csv").read_bytes() == (tmp_path / "r2" / "losses.csv").read_bytes()
        assert TrainConfig.load(tmp_path / "r1" / "config.txt") == TrainConfig.load(config)

        ck = tmp_path / "r1" / "checkpoints" / "final.ckpt"
        assert run("eval", "--checkpoint", ck, "--data", dataset, "--out", tmp_path / "ev") == 0
        rows = read_csv(tmp_path / "ev" / "metrics.csv")
        assert rows[0] == ["split", "Dic", "Jac", "Acc", "Sen", "Spe"]
        train_rows = read_csv(tmp_path / "r1" / "metrics.csv")
        assert rows[1] == train_rows[2]  # same test-split metrics as the training run
        assert json.loads((tmp_path / "ev" / "report.json").read_text())["split"] == "test"

    def test_eval_unknown_split(self, tmp_path, dataset):
        ck = tmp_path / "x.ckpt"
        from cpgan.networks import init_params

        T.save_checkpoint(ck, init_params(0).named())
        assert run("eval", "--checkpoint", ck, "--data", dataset, "--out", tmp_path / "ev", "--split", "dev") == 1

    def test_nan_is_runtime_error(self, tmp_path, dataset, config, monkeypatch):
        from cpgan import losses as L

        monkeypatch.setattr(L, "rotation_loss", lambda a, b: T.log(T.mul(T.mean(a), 0.0)))
        assert run("train", "--config", config, "--data", dataset, "--out", tmp_path / "r") == 2


class TestSweepAblate:
    def test_single_rate_single_seed(self, tmp_path, dataset, config):
        assert run("sweep", "--config", config, "--data", dataset, "--out", tmp_path / "s",
                   "--rates", "0.5", "--seeds", 1) == 0
        rows = read_csv(tmp_path / "s" / "sweep.csv")
        assert rows[0] == ["rate", "Dic", "Jac", "Acc", "Sen", "Spe"]
        assert len(rows) == 2 and float(rows[1][0]) == 0.5
        assert len(read_csv(tmp_path / "s" / "sweep_per_seed.csv")) == 2
        assert (tmp_path / "s" / "config.txt").exists()

    def test_median_aggregation(self, tmp_path, monkeypatch):
        # fake runs whose Dice is rate * 10 + seed, so each median is the middle seed
        def fake_run(cfg, data, out_dir=None, save_checkpoints=True):
            v = cfg.label_rate * 10 + cfg.seed
            return {"final_validation": dict(dic=v, jac=v, acc=v, sen=v, spe=v)}

        monkeypatch.setattr(cli, "run_experiment", fake_run)
        monkeypatch.setattr(cli, "_load_data", lambda p: {"train": [1]})
        cfg = tmp_path / "c.txt"
        cfg.write_text(TrainConfig().dumps())
        assert run("sweep", "--config", cfg, "--data", tmp_path, "--out", tmp_path / "s", "--seeds", 3) == 0
        rows = read_csv(tmp_path / "s" / "sweep.csv")[1:]
        assert [float(r[0]) for r in rows] == [1.0, 0.8, 0.6, 0.4, 0.2]
        for r in rows:
            assert float(r[1]) == pytest.approx(float(np.float32(float(r[0]) * 10 + 1)))
        assert len(read_csv(tmp_path / "s" / "sweep_per_seed.csv")) == 1 + 15

    def test_bad_rates(self, tmp_path, dataset, config):
        assert run("sweep", "--config", config, "--data", dataset, "--out", tmp_path, "--rates", "x") == 1
        assert run("sweep", "--config", config, "--data", dataset, "--out", tmp_path, "--rates", "1.5") == 1

    def test_unknown_component(self, tmp_path, dataset, config, capsys):
        assert run("ablate", "--component", "dropout", "--config", config, "--data", dataset,
                   "--out", tmp_path) == 1
        err = capsys.readouterr().err
        assert "scm" in err and "assistant" in err

    @pytest.mark.parametrize("component", ["scm", "assistant"])
    def test_paired_rows(self, tmp_path, dataset, config, component):
        out = tmp_path / component
        assert run("ablate", "--component", component, "--config", config, "--data", dataset,
                   "--out", out, "--seeds", 1) == 0
        rows = read_csv(out / "ablation.csv")
        assert rows[0] == [component, "seed", "Dic", "Jac", "Acc", "Sen", "Spe"]
        assert [(r[0], r[1]) for r in rows[1:]] == [("with", "0"), ("without", "0")]
        series = out / "disc_accuracy.csv"
        assert series.exists() == (component == "assistant")
        if component == "assistant":
            s = read_csv(series)
            assert s[0] == ["variant", "seed", "epoch", "disc_acc"] and len(s) == 3


class TestGradcheck:
    def test_all_registered_reported(self, capsys):
        assert run("gradcheck", "--seed", 0) == 0
        out = capsys.readouterr().out
        for name in gc.REGISTRY:
            assert f"PASS {name} " in out

    def test_wrong_gradient_fails(self, monkeypatch, capsys):
        def broken(x):
            # forward is x^2 but the recorded backward claims 3x
            return T._result(x.data ** 2, (x,), lambda g: (g * 3 * x.data,), "broken")

        def build(rng):
            return (lambda x: T.sum(broken(x))), [rng.normal(size=(3,))]

        reg = dict(gc.REGISTRY)
        reg["broken_square"] = build
        monkeypatch.setattr(gc, "REGISTRY", reg)
        assert run("gradcheck") == 2
        assert "FAIL broken_square" in capsys.readouterr().out


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "cpgan.cli", "ablate", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--component" in res.stdout
