"""End-to-end command line flows on a tiny synthetic fleet.

Every test drives ``main(argv)`` in-process and checks exit codes, artifact
files, and the error contract (nonzero exit, message on stderr).
"""

import json

import numpy as np
import pytest

from rulkit.cli import main

UNITS = "u001,u002,u003"
TEST_UNIT = "u004"


@pytest.fixture(scope="module")
def fleet_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fleet")
    rc = main([
        "synth", "--out", str(out), "--units", "4", "--steps", "15",
        "--seed", "3", "--feature-dim", "4",
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def mcd_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "mcd.json"
    path.write_text(json.dumps({
        "kind": "mcd", "hidden_layers": 1, "hidden_units": 4,
        "keep_prob": 0.8, "test_samples": 4, "batch_size": 64,
    }))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, fleet_dir, mcd_config):
    out = tmp_path_factory.mktemp("trained")
    rc = main([
        "train", "--data", str(fleet_dir), "--out", str(out),
        "--config", str(mcd_config), "--epochs", "2", "--seed", "0",
        "--train-units", UNITS, "--test-units", TEST_UNIT,
    ])
    assert rc == 0
    return out


class TestSynth:
    def test_writes_unit_files(self, fleet_dir, capsys):
        files = sorted(p.name for p in fleet_dir.glob("*.csv"))
        assert files == ["u001.csv", "u002.csv", "u003.csv", "u004.csv"]

    def test_reports_row_counts(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path / "f"), "--units", "2",
                   "--steps", "10", "--seed", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "2 units" in out and "u001:" in out

    def test_invalid_arguments_fail_cleanly(self, tmp_path, capsys):
        rc = main(["synth", "--out", str(tmp_path / "f"), "--units", "1"])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error: ")


class TestTrain:
    def test_report_on_stdout_and_artifacts_on_disk(self, trained, capsys):
        for name in ("checkpoint.npz", "report.txt", "report.json",
                     "predictions_test.csv", "epochs.csv", "config.json"):
            assert (trained / name).exists(), name

    def test_stdout_carries_both_reports(self, fleet_dir, mcd_config, tmp_path, capsys):
        rc = main([
            "train", "--data", str(fleet_dir), "--out", str(tmp_path / "o"),
            "--config", str(mcd_config), "--epochs", "1", "--seed", "0",
            "--train-units", UNITS, "--test-units", TEST_UNIT,
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "# validation" in out and "# test" in out
        assert "rmse" in out and "prob_alpha_lambda" in out

    def test_same_seed_same_artifacts(self, fleet_dir, mcd_config, tmp_path, capsys):
        argv = [
            "train", "--data", str(fleet_dir), "--config", str(mcd_config),
            "--epochs", "1", "--seed", "5",
            "--train-units", UNITS, "--test-units", TEST_UNIT,
        ]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "report.txt").read_bytes() == \
            (tmp_path / "b" / "report.txt").read_bytes()

    def test_default_split_is_announced(self, fleet_dir, mcd_config, tmp_path, capsys):
        rc = main([
            "train", "--data", str(fleet_dir), "--out", str(tmp_path / "o"),
            "--config", str(mcd_config), "--epochs", "1",
        ])
        assert rc == 0
        assert "no split given" in capsys.readouterr().err

    def test_missing_data_directory(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o"), "--kind", "svgp"])
        assert rc == 1
        assert "error: " in capsys.readouterr().err

    def test_unknown_config_key(self, fleet_dir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"kind": "svgp", "dropout": 0.5}))
        rc = main(["train", "--data", str(fleet_dir),
                   "--out", str(tmp_path / "o"), "--config", str(bad)])
        assert rc == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_invalid_kind_objective_combination(self, fleet_dir, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"kind": "dspp", "objective": "elbo"}))
        rc = main(["train", "--data", str(fleet_dir),
                   "--out", str(tmp_path / "o"), "--config", str(bad)])
        assert rc == 1
        assert "ppgpr" in capsys.readouterr().err


class TestPredict:
    def test_writes_predictions(self, trained, fleet_dir, tmp_path, capsys):
        rc = main([
            "predict", "--checkpoint", str(trained / "checkpoint.npz"),
            "--data", str(fleet_dir), "--out", str(tmp_path / "p"),
            "--units", TEST_UNIT,
        ])
        assert rc == 0
        lines = (tmp_path / "p" / "predictions.csv").read_text().splitlines()
        assert lines[0].startswith("unit_id,t,rul_true,pred_mean,pred_variance")
        assert len(lines) > 2
        assert all(ln.startswith(TEST_UNIT) for ln in lines[1:])

    def test_missing_checkpoint(self, fleet_dir, tmp_path, capsys):
        rc = main(["predict", "--checkpoint", str(tmp_path / "nope.npz"),
                   "--data", str(fleet_dir), "--out", str(tmp_path / "p")])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error: ")


class TestEvaluate:
    def test_report_files_and_stdout(self, trained, fleet_dir, tmp_path, capsys):
        rc = main([
            "evaluate", "--checkpoint", str(trained / "checkpoint.npz"),
            "--data", str(fleet_dir), "--out", str(tmp_path / "e"),
            "--units", TEST_UNIT,
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "prob_alpha_lambda" in out
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert report["nll_convention"] == "per_sample_mean"
        assert (tmp_path / "e" / "predictions.csv").exists()

    def test_alpha_override(self, trained, fleet_dir, tmp_path, capsys):
        rc = main([
            "evaluate", "--checkpoint", str(trained / "checkpoint.npz"),
            "--data", str(fleet_dir), "--out", str(tmp_path / "e"),
            "--alpha", "0.35", "--units", TEST_UNIT,
        ])
        assert rc == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert report["alpha"] == 0.35

    def test_deterministic_model_matches_training_report(
        self, fleet_dir, tmp_path, capsys
    ):
        # the sparse GP predicts deterministically, so scoring the reloaded
        # checkpoint on the test unit reproduces the training-time metrics
        cfg = tmp_path / "svgp.json"
        cfg.write_text(json.dumps({"kind": "svgp", "num_inducing": 8,
                                   "batch_size": 64}))
        out = tmp_path / "train"
        rc = main([
            "train", "--data", str(fleet_dir), "--out", str(out),
            "--config", str(cfg), "--epochs", "1", "--seed", "0",
            "--train-units", UNITS, "--test-units", TEST_UNIT,
        ])
        assert rc == 0
        rc = main([
            "evaluate", "--checkpoint", str(out / "checkpoint.npz"),
            "--data", str(fleet_dir), "--out", str(tmp_path / "e"),
            "--units", TEST_UNIT,
        ])
        assert rc == 0
        trained_report = json.loads((out / "report.json").read_text())["test"]
        scored = json.loads((tmp_path / "e" / "report.json").read_text())
        assert scored["rmse"] == trained_report["rmse"]
        assert scored["nll"] == trained_report["nll"]


class TestGridsearch:
    def test_single_family_grid(self, fleet_dir, mcd_config, tmp_path, capsys):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"hidden_units": [4, 8]}))
        rc = main([
            "gridsearch", "--data", str(fleet_dir), "--out", str(tmp_path / "g"),
            "--config", str(mcd_config), "--grid", str(grid),
            "--epochs", "1", "--seed", "0",
            "--train-units", UNITS, "--test-units", TEST_UNIT,
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "selection_metric val_nll" in out
        assert (tmp_path / "g" / "grid.txt").exists()
        assert (tmp_path / "g" / "run_000" / "checkpoint.npz").exists()
        assert (tmp_path / "g" / "run_001" / "checkpoint.npz").exists()

    def test_all_families_rejects_custom_grid(self, fleet_dir, tmp_path, capsys):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"num_inducing": [4]}))
        rc = main([
            "gridsearch", "--data", str(fleet_dir), "--out", str(tmp_path / "g"),
            "--grid", str(grid), "--all-families",
        ])
        assert rc == 1
        assert "--all-families" in capsys.readouterr().err
