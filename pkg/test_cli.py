"""
Tests for the command-line entry point.
"""
import csv
import json

import pytest

from app.cli import main
from app.models import checkpoint
from app.models.network import init
from app.schemas.config import NetworkConfig

NETWORK = {"channels": 3, "base_filters": 4, "depth": 2, "seed": 0}


@pytest.fixture
def config_file(tmp_path):
    config = {
        "dataset": {"slide_count": 6, "height": 32, "width": 32, "seed": 3},
        "network": NETWORK,
        "pipeline": {
            "patch_size": 16,
            "batch_size": 4,
            "buffer_capacity": 32,
            "map_chunk_size": 32,
            "total_steps": 4,
            "exchange_period": 2,
            "patches_per_visit": 4,
            "train_steps_per_map": 2,
        },
        "data_dir": str(tmp_path / "data"),
        "output_dir": str(tmp_path / "run"),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


class TestTuneBeta:
    def test_reference_beta1(self, capsys):
        code = main(["tune-beta", "--gamma", "0.33", "--r", "0.5", "--beta0", "0", "--theta0", "0.05"])
        assert code == 0
        payload = _stdout_json(capsys)
        assert payload["beta1"] == pytest.approx(0.6128, abs=0.005)
        assert payload["kl_optimal_theta0"] == pytest.approx(0.2481, abs=1e-3)
        by_beta = {row["beta1"]: row["optimal_theta0"] for row in payload["table"]}
        assert by_beta[0.0] == pytest.approx(0.2481, abs=1e-3)

    def test_writes_surface_plot(self, tmp_path, capsys):
        target = tmp_path / "surfaces.svg"
        code = main(["tune-beta", "--gamma", "0.33", "--r", "0.5", "--beta0", "0", "--theta0", "0.05",
                     "--plot", str(target)])
        assert code == 0
        assert target.exists()

    def test_missing_flag_is_a_usage_error(self, capsys):
        code = main(["tune-beta", "--gamma", "0.33", "--r", "0.5", "--beta0", "0"])
        assert code == 2
        assert json.loads(capsys.readouterr().err)["error"] == "usage_error"

    def test_out_of_range_noise_is_a_config_error(self, capsys):
        code = main(["tune-beta", "--gamma", "1.5", "--r", "0.5", "--beta0", "0", "--theta0", "0.05"])
        assert code == 2
        assert "gamma" in json.loads(capsys.readouterr().err)["detail"]


class TestConfigErrors:
    def test_unknown_key_is_named(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"pipeline": {"alhpa": 2.0}}))
        code = main(["generate-data", "--config", str(path)])
        assert code == 2
        error = json.loads(capsys.readouterr().err)
        assert error["error"] == "config_error"
        assert "pipeline.alhpa" in error["detail"]

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["generate-data", "--config", str(tmp_path / "absent.json")])
        assert code == 2
        assert json.loads(capsys.readouterr().err)["error"] == "missing_file"

    def test_config_is_required(self, capsys):
        assert main(["train"]) == 2

    def test_missing_checkpoint_is_a_failure(self, config_file, capsys):
        assert main(["generate-data", "--config", str(config_file)]) == 0
        capsys.readouterr()
        code = main(["map", "--config", str(config_file)])
        assert code == 1
        assert json.loads(capsys.readouterr().err)["error"] == "missing_file"


class TestWorkflow:
    def test_generate_data_splits_by_count(self, tmp_path, config_file, capsys):
        out = tmp_path / "twenty"
        config = json.loads(config_file.read_text())
        config["dataset"]["slide_count"] = 20
        config_file.write_text(json.dumps(config))
        assert main(["generate-data", "--config", str(config_file), "--out", str(out)]) == 0
        payload = _stdout_json(capsys)
        assert (payload["benign"], payload["malign"]) == (10, 10)
        assert (out / "index.json").exists()
        with open(out / "summary.csv", newline="") as f:
            assert len(list(csv.DictReader(f))) == 20

    def test_seed_override_changes_the_data(self, tmp_path, config_file, capsys):
        assert main(["generate-data", "--config", str(config_file), "--out", str(tmp_path / "a")]) == 0
        assert main(["generate-data", "--config", str(config_file), "--out", str(tmp_path / "b"), "--seed", "9"]) == 0
        resolved = json.loads((tmp_path / "b" / "resolved_config.json").read_text())
        assert resolved["dataset"]["seed"] == 9
        assert (tmp_path / "a" / "slide_0000.f32").read_bytes() != (tmp_path / "b" / "slide_0000.f32").read_bytes()

    def test_map_then_eval(self, tmp_path, config_file, capsys):
        assert main(["generate-data", "--config", str(config_file)]) == 0
        weights_path = checkpoint.save(init(NetworkConfig(**NETWORK)), tmp_path / "init.nwt")
        capsys.readouterr()

        assert main(["map", "--config", str(config_file), "--checkpoint", str(weights_path)]) == 0
        assert _stdout_json(capsys)["slides"] == 6
        assert (tmp_path / "run" / "maps" / "maps.json").exists()

        assert main(["eval", "--config", str(config_file)]) == 0
        metrics = _stdout_json(capsys)
        assert 0.0 <= metrics["roc_auc"] <= 1.0
        assert 0.0 <= metrics["froc_average"] <= 1.0
        assert "sensitivity_at_0.25_fp" in metrics
        for name in ("metrics.csv", "slide_scores.csv", "roc.csv", "froc.csv", "roc.svg", "froc.svg"):
            assert (tmp_path / "run" / name).exists()

    def test_train_eval_inspect(self, tmp_path, config_file, capsys):
        assert main(["generate-data", "--config", str(config_file)]) == 0
        capsys.readouterr()

        assert main(["train", "--config", str(config_file), "--deterministic"]) == 0
        summary = _stdout_json(capsys)
        assert summary["steps"] == 4
        assert summary["torn_reads"] == 0
        run = tmp_path / "run"
        for name in ("weights.nwt", "run_log.csv", "visits.csv", "resolved_config.json"):
            assert (run / name).exists()
        assert checkpoint.load(run / "weights.nwt").version == 4

        assert main(["eval", "--config", str(config_file), "--checkpoint", str(run / "weights.nwt")]) == 0
        capsys.readouterr()

        target = tmp_path / "overlay.svg"
        code = main(["inspect", "--config", str(config_file), "--slide", "slide_0000",
                     "--checkpoint", str(run / "weights.nwt"), "--out", str(target)])
        assert code == 0
        assert target.exists()
        assert _stdout_json(capsys)["slide_id"] == "slide_0000"
