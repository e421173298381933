import json

import pytest

from nettrim.checkpoint import load_checkpoint
from nettrim.cli import main

SMALL = ["--set", "network.widths=[4,8,24]", "--set", "train.epochs=1",
         "--set", "retrain.epochs=1", "--set", "data.stat_set_size=100",
         "--set", "loop.stat_batch_size=50"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tiny_mnist_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "-q", "--mnist-dir", str(tiny_mnist_dir), "--out", str(out), *SMALL]) == 0
    return out


class TestTrain:
    def test_outputs(self, trained):
        metrics = json.loads((trained / "metrics.json").read_text())
        assert 0 <= metrics["test_accuracy"] <= 1
        assert load_checkpoint(trained / "model.ntrm").digest == metrics["checkpoint_digest"]

    def test_prints_accuracy(self, capsys, tiny_mnist_dir, tmp_path):
        code, out, _ = run(capsys, "train", "-q", "--mnist-dir", tiny_mnist_dir, "--out", tmp_path,
                           "--seed", 3, *SMALL)
        assert code == 0
        assert out.startswith("test_accuracy=")

    def test_missing_data(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "-q", "--mnist-dir", tmp_path / "nowhere", *SMALL)
        assert code == 2
        assert "nowhere" in err

    def test_unknown_key(self, capsys, tiny_mnist_dir):
        code, _, err = run(capsys, "train", "--mnist-dir", tiny_mnist_dir, "--set", "train.nope=1")
        assert code == 1
        assert "unknown config key train.nope" in err

    def test_bad_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("[bogus]\nx = 1\n")
        code, _, err = run(capsys, "train", "--config", cfg)
        assert code == 1
        assert "bogus" in err

    def test_toml_config(self, capsys, tiny_mnist_dir, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(f'[network]\nwidths = [3, 5, 12]\n[train]\nepochs = 1\n'
                       f'[data]\nmnist_dir = "{tiny_mnist_dir}"\nstat_set_size = 100\n')
        code, _, _ = run(capsys, "train", "-q", "--config", cfg, "--out", tmp_path / "o")
        assert code == 0
        assert load_checkpoint(tmp_path / "o" / "model.ntrm").network.config_string() == "3-5-12-10"


class TestStatsTrim:
    def test_stats_idempotent(self, capsys, trained, tiny_mnist_dir, tmp_path):
        ck = trained / "model.ntrm"
        args = ["stats", "-q", "--checkpoint", ck, "--mnist-dir", tiny_mnist_dir, *SMALL]
        assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
        assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
        for name in ("apoz.json", "apoz.csv", "apoz_hist_fc1.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_stats_non_relu_layer(self, capsys, trained, tiny_mnist_dir):
        code, _, err = run(capsys, "stats", "--checkpoint", trained / "model.ntrm", "--layers",
                           "fc2", "--mnist-dir", tiny_mnist_dir, *SMALL)
        assert code == 1
        assert "fc2" in err

    def test_stats_missing_checkpoint(self, capsys, tmp_path):
        code, _, err = run(capsys, "stats", "--checkpoint", tmp_path / "x.ntrm")
        assert code == 2
        assert "x.ntrm" in err

    def test_trim(self, capsys, trained, tiny_mnist_dir, tmp_path):
        ck = trained / "model.ntrm"
        run(capsys, "stats", "-q", "--checkpoint", ck, "--mnist-dir", tiny_mnist_dir,
            "--out", tmp_path, *SMALL)
        code, _, _ = run(capsys, "trim", "-q", "--checkpoint", ck, "--report", tmp_path / "apoz.json",
                         "--out", tmp_path / "t", *SMALL)
        assert code == 0
        plan = json.loads((tmp_path / "t" / "plan.json").read_text())
        trimmed = load_checkpoint(tmp_path / "t" / "trimmed.ntrm")
        base = load_checkpoint(ck)
        assert trimmed.network.widths()[1] == 8 - len(plan["remove"]["conv2"])
        assert trimmed.network.widths()[2] == 24 - len(plan["remove"]["fc1"])
        if any(plan["remove"].values()):
            assert trimmed.lineage == [base.digest]

    def test_trim_empty_plan(self, capsys, trained, tiny_mnist_dir, tmp_path):
        ck = trained / "model.ntrm"
        run(capsys, "stats", "-q", "--checkpoint", ck, "--mnist-dir", tiny_mnist_dir,
            "--out", tmp_path, *SMALL)
        code, _, err = run(capsys, "trim", "--checkpoint", ck, "--report", tmp_path / "apoz.json",
                           "--out", tmp_path / "t", "--set", "policy.sigma_multiplier=50", *SMALL)
        assert code == 0
        assert "nothing pruned" in err
        assert (tmp_path / "t" / "trimmed.ntrm").read_bytes() == ck.read_bytes()

    def test_trim_corrupt_checkpoint(self, capsys, tmp_path):
        bad = tmp_path / "bad.ntrm"
        bad.write_bytes(b"XXXX" + bytes(20))
        rep = tmp_path / "apoz.json"
        rep.write_text("{}")
        code, _, _ = run(capsys, "trim", "--checkpoint", bad, "--report", rep)
        assert code == 2


class TestEvalLoopReport:
    def test_eval(self, capsys, trained, tiny_mnist_dir):
        code, out, _ = run(capsys, "eval", "-q", "--checkpoint", trained / "model.ntrm",
                           "--mnist-dir", tiny_mnist_dir)
        metrics = json.loads((trained / "metrics.json").read_text())
        assert code == 0
        assert out.strip() == f"test_accuracy={metrics['test_accuracy']:.4f}"

    def test_loop_and_report(self, capsys, tiny_mnist_dir, tmp_path):
        loop = ["loop", "-q", "--mnist-dir", tiny_mnist_dir, *SMALL, "--set", "loop.iterations=2",
                "--set", "loop.accuracy_floor=100"]
        code, out, _ = run(capsys, *loop, "--out", tmp_path / "a")
        assert code == 0
        assert "Compression Rate" in out
        rows = (tmp_path / "a" / "summary.csv").read_text().splitlines()
        assert rows[0].startswith("iteration,config,params,compression,pre_acc,post_acc")
        base = tmp_path / "a" / "iter_00.ntrm"
        code, _, _ = run(capsys, *loop, "--out", tmp_path / "b", "--set", "loop.init_mode=from_scratch",
                         "--set", f'loop.baseline_checkpoint="{base}"')
        assert code == 0
        code, out, _ = run(capsys, "report", tmp_path / "a", "--compare", tmp_path / "b",
                           "--out", tmp_path / "r")
        assert code == 0
        assert "Number of Neurons in FC1" in out
        assert (tmp_path / "r" / "ablation.csv").is_file()

    def test_report_missing(self, capsys, tmp_path):
        code, _, _ = run(capsys, "report", tmp_path)
        assert code == 2
