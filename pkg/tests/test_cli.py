import csv
import json
import logging

import pytest

from aesmpn.cli import DEFAULTS, main
from aesmpn.data import load_dataset

TINY = ["--K", "1", "--hidden", "4", "--epochs", "2"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["gen", "--samples", "12", "--seed", "3", "--flows-max", "6", "--out", str(out)]) == 0
    return out / "dataset.jsonl"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(dataset), "--out", str(out)] + TINY) == 0
    return out


class TestGen:
    def test_byte_identical_reruns(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen", "--samples", "4", "--seed", "8", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a/dataset.jsonl").read_bytes() == (tmp_path / "b/dataset.jsonl").read_bytes()

    def test_rho_out_of_range_is_a_usage_error(self, tmp_path, capsys):
        assert main(["gen", "--rho-max", "1.5", "--out", str(tmp_path)]) == 1
        assert "rho" in capsys.readouterr().err

    def test_zero_samples_warns(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING, logger="aesmpn"):
            assert main(["gen", "--samples", "0", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "dataset.jsonl").read_text() == ""
        assert any("empty" in r.message for r in caplog.records)

    def test_manifest(self, dataset):
        m = json.loads((dataset.parent / "manifest.json").read_text())
        assert m["command"] == "gen" and m["status"] == "ok"
        assert m["config"]["samples"] == 12 and m["seed"] == 3
        assert "dataset.jsonl" in m["outputs"]
        assert len(load_dataset(dataset)) == 12


class TestTrain:
    def test_outputs(self, trained):
        for rel in ("normalization.json", "metrics.csv", "ae-smpn2/loss.csv", "ae-smpn2/best.ckpt.json", "ae-smpn2/final.ckpt.json"):
            assert (trained / rel).is_file(), rel
        assert [r["epoch"] for r in _rows(trained / "ae-smpn2/loss.csv")] == ["1", "2"]

    def test_defaults_recorded_in_manifest(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--K", "1", "--hidden", "4", "--epochs", "1"]) == 0
        cfg = json.loads((tmp_path / "manifest.json").read_text())["config"]
        assert cfg["learning_rate"] == 0.001 and cfg["model"] == "ae-smpn2" and cfg["clip_norm"] == 5.0
        assert DEFAULTS["train"]["epochs"] == 50

    def test_preset_sets_readout_depth(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--model", "ae-smpn3"] + TINY) == 0
        meta = json.loads((tmp_path / "ae-smpn3/best.ckpt.json").read_text())["meta"]
        assert meta["model_config"]["readout_depth"] == 3

    def test_rerun_gives_identical_loss_csv(self, dataset, trained, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path)] + TINY) == 0
        for rel in ("ae-smpn2/loss.csv", "metrics.csv"):
            assert (tmp_path / rel).read_bytes() == (trained / rel).read_bytes()

    def test_config_file_then_flags(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"lr": 0.01, "epochs": 1, "hidden": 4, "K": 1, "clip-norm": 2.0}))
        out = tmp_path / "o"
        assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(out), "--lr", "0.005"]) == 0
        settings = json.loads((out / "manifest.json").read_text())["config"]
        assert settings["learning_rate"] == 0.005
        assert settings["clip_norm"] == 2.0 and settings["epochs"] == 1

    def test_unknown_config_key(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"samples": 3}))
        assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o")]) == 1


class TestEvalPredict:
    def test_eval_reproduces_training_metrics(self, dataset, trained, tmp_path):
        ckpt = trained / "ae-smpn2/best.ckpt.json"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset), "--split", "train", "--out", str(tmp_path)]) == 0
        got = float(_rows(tmp_path / "metrics.csv")[0]["mape"])
        want = float(_rows(trained / "metrics.csv")[0]["train_mape"])
        assert abs(got - want) <= 1e-9

    def test_eval_header(self, dataset, trained, tmp_path):
        ckpt = trained / "ae-smpn2/best.ckpt.json"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == "model,split,mape,mae,mse,msle"

    def test_predict_one_row_per_flow(self, dataset, trained, tmp_path):
        ckpt = trained / "ae-smpn2/best.ckpt.json"
        assert main(["predict", "--checkpoint", str(ckpt), "--data", str(dataset), "--out", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "predictions.csv")
        assert len(rows) == sum(s.num_flows for s in load_dataset(dataset))
        assert set(rows[0]) == {"sample_id", "flow_id", "predicted_delay"}

    def test_incompatible_checkpoint_writes_nothing(self, dataset, trained, tmp_path):
        doc = json.loads((trained / "ae-smpn2/best.ckpt.json").read_text())
        doc["meta"]["model_config"]["flow_dim"] = 3
        bad = tmp_path / "bad.ckpt.json"
        bad.write_text(json.dumps(doc))
        out = tmp_path / "o"
        assert main(["predict", "--checkpoint", str(bad), "--data", str(dataset), "--out", str(out)]) == 1
        assert not (out / "predictions.csv").exists()

    def test_missing_checkpoint(self, dataset, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "x.json"), "--data", str(dataset), "--out", str(tmp_path)]) == 1


class TestGradcheck:
    def test_passes_and_lists_every_check(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0
        text = capsys.readouterr().out
        results = json.loads((tmp_path / "gradcheck.json").read_text())
        for r in results:
            assert r["name"] in text
        assert {"matmul", "lstm_fused", "segment_sum"} <= {r["name"] for r in results}
        assert "model" in {r["group"] for r in results}

    def test_coarse_step_breaches_tolerance(self, capsys):
        assert main(["gradcheck", "--eps", "1e-2"]) == 2
        assert "FAIL" in capsys.readouterr().out


class TestUsage:
    def test_unknown_subcommand(self):
        assert main(["bogus"]) == 1

    def test_writes_only_inside_out(self, dataset, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        out = tmp_path / "run"
        assert main(["gen", "--samples", "2", "--out", str(out)]) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["run"]
        assert sorted(p.name for p in out.iterdir()) == ["dataset.jsonl", "manifest.json"]
