import json

import numpy as np
import pytest

from koopmpc import ConfigError
from koopmpc.cli import main
from koopmpc.config import ExperimentConfig, parse_config
from koopmpc.io import model_from_json, read_json


SMALL_CONFIG = {
    "n_trajectories": 12,
    "n_validation": 4,
    "mpc_t_end": 2.0,
    "ic_grid_n": 3,
    "ulam_counts": [3, 3],
    "ulam_samples_per_box": 40,
}


def write_config(tmp_path, extra=None, name="cfg.json"):
    payload = dict(SMALL_CONFIG)
    payload.update(extra or {})
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


class TestParseConfig:
    def test_empty_file_yields_defaults(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg.mu == 0.2
        assert cfg.n_trajectories == 200
        assert cfg.dt == 0.05
        assert cfg.edmdc_order == 5
        assert cfg.delay_depth == 5
        assert cfg.mpc_horizon == 15
        assert cfg.input_weight == 0.1
        assert cfg.u_max == 5.0 and cfg.du_max == 50.0

    def test_single_override(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"mu": 1.0}')
        cfg = parse_config(path)
        assert cfg.mu == 1.0
        assert cfg.n_trajectories == 200  # everything else stays default

    def test_unknown_key_is_rejected_by_name(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"horizonn": 10}')
        with pytest.raises(ConfigError, match="horizonn"):
            parse_config(path)

    def test_type_mismatch_names_the_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"n_trajectories": "many"}')
        with pytest.raises(ConfigError, match="n_trajectories"):
            parse_config(path)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "missing.json")

    def test_negative_seed_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"seed": -1}')
        with pytest.raises(ConfigError, match="seed"):
            parse_config(path)

    def test_resolved_echo_is_complete(self):
        cfg = ExperimentConfig()
        echo = cfg.resolved()
        assert echo["mu"] == 0.2
        assert set(echo) == {f for f in cfg.__dataclass_fields__}


class TestGenerate:
    def test_single_snapshot_row(self, tmp_path):
        cfg = write_config(tmp_path, {"n_trajectories": 1, "training_t_end": 0.05})
        out = tmp_path / "data"
        assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
        rows = (out / "samples.csv").read_text().strip().splitlines()
        assert len(rows) == 2  # header + exactly one snapshot pair

    def test_manifest_written(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "data"
        main(["generate", "--config", str(cfg), "--out", str(out)])
        manifest = read_json(out / "manifest.json")
        assert manifest["state_dim"] == 2
        assert manifest["config"]["n_trajectories"] == 12


class TestFitRoundTrip:
    @pytest.mark.parametrize("model_name", ["dmdc", "edmdc", "delay"])
    def test_fit_reload_identical(self, tmp_path, model_name):
        cfg = write_config(tmp_path)
        data = tmp_path / "data"
        main(["generate", "--config", str(cfg), "--out", str(data)])
        out = tmp_path / "fit"
        assert main([
            "fit", str(data), "--model", model_name, "--config", str(cfg), "--out", str(out)
        ]) == 0
        path = out / f"model_{model_name}.json"
        first = model_from_json(path)
        raw = read_json(path)
        again_path = tmp_path / "again.json"
        from koopmpc.io import model_to_json

        model_to_json(first, again_path)
        assert read_json(again_path) == raw  # reload and re-save is lossless

    def test_predict_runs_on_fit_output(self, tmp_path):
        cfg = write_config(tmp_path)
        data = tmp_path / "data"
        main(["generate", "--config", str(cfg), "--out", str(data)])
        fit_dir = tmp_path / "fit"
        main(["fit", str(data), "--model", "dmdc", "--config", str(cfg), "--out", str(fit_dir)])
        out = tmp_path / "pred"
        assert main([
            "predict", str(fit_dir / "model_dmdc.json"), str(data),
            "--config", str(cfg), "--out", str(out),
        ]) == 0
        errors = read_json(out / "prediction_errors_dmdc.json")
        assert errors["rollout_rms_median"] is not None

    def test_mpc_command(self, tmp_path):
        cfg = write_config(tmp_path)
        data = tmp_path / "data"
        main(["generate", "--config", str(cfg), "--out", str(data)])
        fit_dir = tmp_path / "fit"
        main(["fit", str(data), "--model", "edmdc", "--config", str(cfg), "--out", str(fit_dir)])
        out = tmp_path / "mpc"
        assert main([
            "mpc", str(fit_dir / "model_edmdc.json"), "--config", str(cfg), "--out", str(out),
        ]) == 0
        summary = read_json(out / "closed_loop_edmdc.json")
        assert summary["n_steps"] == 40


class TestUlamCommand:
    def test_identity_plant_keeps_uniform_density(self, tmp_path):
        cfg = write_config(tmp_path, {"ulam_plant": "zero", "ulam_levels": [0.0, 1.0]})
        out = tmp_path / "ulam"
        assert main(["ulam", "--config", str(cfg), "--out", str(out)]) == 0
        densities = read_json(out / "densities.json")["densities"]
        assert len(densities) == 2
        for entry in densities:
            assert entry["converged"]
            density = np.asarray(entry["density"])
            # Uniform over the 9 in-domain boxes, nothing outside.
            assert np.allclose(density[:-1], 1.0 / 9.0)
            assert density[-1] == 0.0


class TestBenchmarkCommand:
    def test_report_structure(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "bench"
        assert main(["benchmark", "--config", str(cfg), "--out", str(out)]) == 0
        report = read_json(out / "report.json")
        assert sorted(report["models"]) == ["delay", "dmdc", "edmdc"]
        for name in report["models"]:
            assert set(report["models"][name]) == {"one_step_rms_median", "rollout_rms_median"}
        n_val = report["config"]["n_validation"]
        n_grid = report["config"]["ic_grid_n"] ** 2
        for name in report["models"]:
            assert len(report["mpc"]["validation"][name]["per_ic"]) == n_val
            assert len(report["mpc"]["grid"][name]["per_ic"]) == n_grid
        assert (out / "per_ic_costs.csv").exists()
        assert (out / "validation_errors.csv").exists()
        assert (out / "run_info.json").exists()

    def test_every_reported_number_is_finite(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "bench"
        main(["benchmark", "--config", str(cfg), "--out", str(out)])
        report = read_json(out / "report.json")

        def walk(node):
            if isinstance(node, dict):
                for v in node.values():
                    walk(v)
            elif isinstance(node, list):
                for v in node:
                    walk(v)
            elif isinstance(node, float):
                assert np.isfinite(node)

        walk(report)


class TestSchemaStability:
    def test_csv_headers_are_fixed(self, tmp_path):
        cfg = write_config(tmp_path)
        data = tmp_path / "data"
        main(["generate", "--config", str(cfg), "--out", str(data)])
        assert (data / "samples.csv").read_text().splitlines()[0] == (
            "t,x1,x2,u1,xp1,xp2"
        )
        assert (data / "trajectories.csv").read_text().splitlines()[0] == (
            "traj,t,x1,x2,u1"
        )
        fit_dir = tmp_path / "fit"
        main(["fit", str(data), "--model", "dmdc", "--config", str(cfg), "--out", str(fit_dir)])
        out = tmp_path / "mpc"
        main(["mpc", str(fit_dir / "model_dmdc.json"), "--config", str(cfg), "--out", str(out)])
        assert (out / "closed_loop_dmdc.csv").read_text().splitlines()[0] == (
            "t,x1,x2,u1,stage_cost,cumulative_cost"
        )


class TestReportEcho:
    def test_config_echo_reruns_identically(self, tmp_path):
        from koopmpc.benchmark import run_benchmark
        from koopmpc.config import config_from_mapping
        from koopmpc.io import jsonify

        cfg = config_from_mapping(dict(SMALL_CONFIG))
        report, _ = run_benchmark(cfg)
        echoed = config_from_mapping(report["config"])
        report2, _ = run_benchmark(echoed)
        assert jsonify(report) == jsonify(report2)


class TestSeedSweep:
    def test_sweep_writes_per_seed_reports(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {"run_mpc_validation": False, "run_mpc_grid": False, "n_trajectories": 8},
        )
        out = tmp_path / "sweep"
        assert main([
            "benchmark", "--config", str(cfg), "--out", str(out), "--seeds", "0-2",
        ]) == 0
        sweep = read_json(out / "seed_sweep.json")["seeds"]
        assert [entry["seed"] for entry in sweep] == [0, 1, 2]
        for seed in (0, 1, 2):
            report = read_json(out / f"seed_{seed}" / "report.json")
            assert report["seed"] == seed

    def test_bad_range_rejected(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main([
            "benchmark", "--config", str(cfg), "--out", str(tmp_path / "x"),
            "--seeds", "5-2",
        ]) == 2


class TestPartialStateDelay:
    def test_scalar_embedding_scores_observed_coordinate(self):
        from koopmpc.benchmark import (
            fit_models,
            make_training_data,
            make_validation_trajectories,
            prediction_errors,
        )
        from koopmpc.config import config_from_mapping

        cfg = config_from_mapping({
            "seed": 2, "n_trajectories": 30, "n_validation": 4,
            "delay_full_state": False, "models": ["delay"],
            "run_mpc_validation": False, "run_mpc_grid": False,
        })
        plant, trajs, samples = make_training_data(cfg)
        models = fit_models(cfg, trajs, samples)
        assert models["delay"].recovered_dim == 1
        validation = make_validation_trajectories(cfg, plant)
        errors = prediction_errors(models, validation, cfg.prediction_horizon)
        rms = errors["delay"]["rollout_rms"]
        assert len(rms) == 4
        assert all(np.isfinite(v) for v in rms)


class TestStageErrors:
    def test_failing_stage_is_named_and_partials_survive(self, tmp_path):
        from koopmpc import InsufficientDataError
        from koopmpc.benchmark import run_benchmark
        from koopmpc.config import config_from_mapping

        # Depth-5 delays cannot be built from a single-step horizon.
        cfg = config_from_mapping({
            "n_trajectories": 8, "training_t_end": 0.05, "n_validation": 2,
        })
        with pytest.raises(InsufficientDataError, match="model-fitting"):
            run_benchmark(cfg)
        try:
            run_benchmark(cfg)
        except InsufficientDataError as err:
            assert err.partial_report["config"]["n_trajectories"] == 8


class TestExitCodes:
    def test_config_error_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"nope": 1}')
        assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
        assert "nope" in capsys.readouterr().err

    def test_runtime_error_exits_3(self, tmp_path, capsys):
        # fit pointed at a directory that generate never wrote
        assert main(["fit", str(tmp_path / "missing"), "--model", "dmdc",
                     "--out", str(tmp_path / "x")]) == 3

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["fit"])  # missing required positional and --model
        assert exc.value.code == 2
