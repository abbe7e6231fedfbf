import json
import os

import pytest

from mmkg_align.cli import run


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ds"))
    code = run(["synth", "--out", out, "--entities", "40", "--relations", "4",
                "--attributes", "6", "--edge-factor", "3", "--noise", "0.1",
                "--latent-dim", "8", "--img-dim", "8", "--seed", "5"])
    assert code == 0
    return out


TRAIN_SETS = ["epochs=4", "struct_dim=12", "modal_dim=6", "bigram_dim=32",
              "img_dim=8", "eval_every=2", "batch_size=8"]


def _sets(extra=()):
    out = []
    for kv in TRAIN_SETS + list(extra):
        out += ["--set", kv]
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    code = run(["train", "--data", dataset, "--out", out] + _sets())
    assert code == 0
    return out


class TestTrainCommand:
    def test_outputs_written(self, trained):
        for name in ("model.ckpt", "report.json", "trainlog.jsonl"):
            assert os.path.exists(os.path.join(trained, name))
        report = json.load(open(os.path.join(trained, "report.json")))
        assert {"metrics", "similarity_profile", "config", "backend"} <= set(report)
        assert report["config"]["epochs"] == 4
        lines = open(os.path.join(trained, "trainlog.jsonl")).read().splitlines()
        assert len(lines) == report["epochs_run"]
        assert json.loads(lines[0])["epoch"] == 1

    def test_summary_line(self, dataset, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert run(["train", "--data", dataset, "--out", out] + _sets()) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["epochs_run"] == 4
        assert "hits@1" in summary["metrics"]

    def test_unsupervised_mode(self, dataset, tmp_path):
        out = str(tmp_path / "unsup")
        code = run(["train", "--data", dataset, "--out", out]
                   + _sets(["unsupervised_mode=name", "epochs=2"]))
        assert code == 0
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["best_dev"] is None


class TestEvalCommand:
    def test_reproduces_training_metrics(self, dataset, trained, capsys):
        assert run(["eval", "--data", dataset, "--checkpoint",
                    os.path.join(trained, "model.ckpt")]) == 0
        got = json.loads(capsys.readouterr().out)
        want = json.load(open(os.path.join(trained, "report.json")))
        assert got["metrics"] == want["metrics"]
        assert got["per_direction"] == want["per_direction"]

    def test_entity_count_mismatch(self, trained, tmp_path, capsys):
        other = str(tmp_path / "other")
        assert run(["synth", "--out", other, "--entities", "24", "--relations",
                    "3", "--attributes", "4", "--edge-factor", "2",
                    "--latent-dim", "4", "--img-dim", "8", "--seed", "1"]) == 0
        code = run(["eval", "--data", other, "--checkpoint",
                    os.path.join(trained, "model.ckpt")])
        assert code == 3

    def test_missing_checkpoint(self, dataset):
        assert run(["eval", "--data", dataset, "--checkpoint", "/no/such.ckpt"]) == 3


class TestExitCodes:
    def test_config_errors(self, dataset, tmp_path):
        out = str(tmp_path / "x")
        assert run(["train", "--data", dataset, "--out", out,
                    "--set", "lr=abc"]) == 2
        assert run(["train", "--data", dataset, "--out", out,
                    "--set", "warp=9"]) == 2

    def test_bad_config_file(self, dataset, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run(["print-config", "--config", str(bad)]) == 2

    def test_missing_data(self, tmp_path):
        assert run(["train", "--data", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "o")]) == 3

    def test_usage_error(self):
        assert run([]) == 2
        assert run(["train"]) == 2

    def test_help_exits_zero(self):
        assert run(["--help"]) == 0


class TestGradcheckCommand:
    def test_clean_pass(self, capsys):
        assert run(["gradcheck"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 7
        assert all(line.endswith("PASS") for line in lines)

    def test_corrupt_fails(self, capsys):
        assert run(["gradcheck", "--corrupt"]) == 4
        out = capsys.readouterr().out
        assert "FAIL" in out

    def test_corrupt_fault_is_reset(self):
        from mmkg_align import tensor as T
        assert run(["gradcheck", "--corrupt"]) == 4
        assert T._BACKWARD_FAULT is None


class TestPrintConfig:
    def test_defaults_and_overrides(self, capsys):
        assert run(["print-config", "--set", "distill=off",
                    "--set", "iterative.every=7"]) == 0
        cfg = json.loads(capsys.readouterr().out)
        assert cfg["distill"] is False
        assert cfg["iterative"]["every"] == 7
        assert cfg["tau_contrastive"] == 0.1

    def test_config_file_round_trip(self, tmp_path, capsys):
        assert run(["print-config", "--set", "lr=0.002"]) == 0
        text = capsys.readouterr().out
        path = tmp_path / "cfg.json"
        path.write_text(text)
        assert run(["print-config", "--config", str(path)]) == 0
        assert json.loads(capsys.readouterr().out) == json.loads(text)
