"""Tests for the command-line interface and its artifact layout."""

import json

import numpy as np
import pytest

from ame_lab.cli import RunConfig, informative_groups, main, run_id

def base_config(tmp_path, **overrides):
    cfg = {
        "out_dir": str(tmp_path / "runs"),
        "model": {
            "feature_partition": [[0], [1], [2], [3]],
            "expert_hidden": [4],
            "gate_hidden": 6,
            "aux_hidden": [6],
            "task": "classification",
            "num_classes": 2,
            "alpha": 0.1,
            "seed": 5,
            "learning_rate": 0.01,
            "batch_size": 64,
            "epochs": 4,
            "patience": 12,
        },
        "data": {
            "kind": "informative_subset_classification",
            "total_features": 4,
            "informative": [0, 1],
            "weights": [2.0, 1.0],
            "noise_scale": 0.5,
            "n_train": 300,
            "n_val": 80,
            "n_test": 80,
            "seed": 5,
        },
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run_dir_of(tmp_path, cfg):
    return tmp_path / "runs" / run_id(RunConfig.from_dict(cfg))


class TestConfigParsing:
    def test_unknown_top_level_field_rejected(self, tmp_path, capsys):
        cfg = base_config(tmp_path)
        cfg["learning_rate_typo"] = 0.1
        code = main(["train", "--config", write_config(tmp_path, cfg)])
        assert code == 2
        assert "learning_rate_typo" in capsys.readouterr().err

    def test_unknown_nested_field_rejected(self, tmp_path, capsys):
        cfg = base_config(tmp_path)
        cfg["model"]["momentum"] = 0.9
        code = main(["train", "--config", write_config(tmp_path, cfg)])
        assert code == 2
        assert "momentum" in capsys.readouterr().err

    def test_command_mismatch_rejected(self, tmp_path, capsys):
        cfg = base_config(tmp_path, command="explain")
        code = main(["train", "--config", write_config(tmp_path, cfg)])
        assert code == 2
        assert "command" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "nope.json")])
        assert code == 2
        assert "does not exist" in capsys.readouterr().err

    def test_task_mismatch_between_model_and_data(self, tmp_path, capsys):
        cfg = base_config(tmp_path)
        cfg["model"]["task"] = "regression"
        code = main(["train", "--config", write_config(tmp_path, cfg)])
        assert code == 2
        assert "task" in capsys.readouterr().err

    def test_help_lists_config_fields_with_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for field_name in ("feature_partition", "alpha", "noise_scale", "fraction",
                           "alphas", "learning_rate", "out_dir"):
            assert field_name in text
        assert "default" in text

    def test_seed_flag_overrides_nested_seeds(self, tmp_path):
        cfg = RunConfig.from_dict(base_config(tmp_path, seed=99))
        from ame_lab.cli import resolve_config
        resolve_config(cfg)
        assert cfg.model.seed == 99 and cfg.data.seed == 99


class TestTrainCommand:
    def test_artifacts_written(self, tmp_path, capsys):
        cfg = base_config(tmp_path)
        code = main(["train", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        run_dir = run_dir_of(tmp_path, cfg)
        for name in ("config.json", "model.json", "training_log.csv"):
            assert (run_dir / name).exists()
        out = capsys.readouterr().out
        assert "test main_loss" in out

    def test_rerun_reproduces_identical_bytes(self, tmp_path):
        cfg = base_config(tmp_path)
        path = write_config(tmp_path, cfg)
        main(["train", "--config", path])
        run_dir = run_dir_of(tmp_path, cfg)
        first = {n: (run_dir / n).read_bytes()
                 for n in ("model.json", "training_log.csv")}
        main(["train", "--config", path, "--out", str(tmp_path / "again")])
        again = tmp_path / "again" / run_dir.name
        for name, blob in first.items():
            assert (again / name).read_bytes() == blob
        # config echoes agree except for the overridden output directory
        a = json.loads((run_dir / "config.json").read_text())
        b = json.loads((again / "config.json").read_text())
        a.pop("out_dir"), b.pop("out_dir")
        assert a == b

    def test_alpha_zero_log_has_mge_column(self, tmp_path):
        cfg = base_config(tmp_path)
        cfg["model"]["alpha"] = 0.0
        main(["train", "--config", write_config(tmp_path, cfg)])
        log = (run_dir_of(tmp_path, cfg) / "training_log.csv").read_text().splitlines()
        assert log[0].split(",")[3] == "mge"
        assert all(np.isfinite(float(line.split(",")[3])) for line in log[1:])

    def test_divergence_exits_nonzero(self, tmp_path, capsys):
        cfg = base_config(tmp_path)
        cfg["model"]["optimizer"] = "sgd"
        cfg["model"]["learning_rate"] = 1e6
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            code = main(["train", "--config", write_config(tmp_path, cfg)])
        assert code == 1
        assert "diverged" in capsys.readouterr().err


class TestExplainCommand:
    def trained_model_path(self, tmp_path):
        cfg = base_config(tmp_path)
        main(["train", "--config", write_config(tmp_path, cfg, "train.json")])
        return str(run_dir_of(tmp_path, cfg) / "model.json")

    def test_requires_model_path(self, tmp_path, capsys):
        cfg = base_config(tmp_path)
        code = main(["explain", "--config", write_config(tmp_path, cfg)])
        assert code == 2
        assert "model_path" in capsys.readouterr().err

    def test_estimator_blocks_share_sample_ids(self, tmp_path):
        model_path = self.trained_model_path(tmp_path)
        cfg = base_config(tmp_path, model_path=model_path,
                          estimators=["ame", "saliency", "occlusion"])
        cfg["data"]["n_test"] = 12
        code = main(["explain", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        run_dir = run_dir_of(tmp_path, cfg)
        from ame_lab.attribution import read_importance_csv
        rows = read_importance_csv(run_dir / "importance.csv")
        by_est = {}
        for row in rows:
            by_est.setdefault(row["estimator"], []).append(row["sample_id"])
        assert set(by_est) == {"ame", "saliency", "occlusion"}
        assert len(set(map(tuple, by_est.values()))) == 1
        assert (run_dir / "importance.json").exists()

    def test_rows_sum_to_one(self, tmp_path):
        model_path = self.trained_model_path(tmp_path)
        cfg = base_config(tmp_path, model_path=model_path, estimators=["ame"])
        main(["explain", "--config", write_config(tmp_path, cfg)])
        from ame_lab.attribution import read_importance_csv
        rows = read_importance_csv(run_dir_of(tmp_path, cfg) / "importance.csv")
        for row in rows:
            total = sum(v for k, v in row.items() if k.startswith("group_"))
            assert abs(total - 1.0) <= 1e-6

    def test_partition_mismatch_rejected(self, tmp_path, capsys):
        model_path = self.trained_model_path(tmp_path)
        cfg = base_config(tmp_path, model_path=model_path)
        cfg["model"]["feature_partition"] = [[0, 1], [2], [3]]
        code = main(["explain", "--config", write_config(tmp_path, cfg)])
        assert code == 2
        assert "partition" in capsys.readouterr().err


class TestBenchmarkCommand:
    def test_rows_carry_seed_and_hash(self, tmp_path):
        cfg = base_config(tmp_path, protocols=["masking", "recall", "timing"],
                          estimators=["ame"], n=30, k=2, fraction=0.25)
        code = main(["benchmark", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        from ame_lab.benchmark import read_benchmark_csv
        rows = read_benchmark_csv(run_dir_of(tmp_path, cfg) / "benchmark.csv")
        assert rows
        assert all(r["seed"] == 5 and r["model_hash"] for r in rows)
        protocols = {r["protocol"] for r in rows}
        assert protocols == {"masking", "recall", "timing"}

    def test_mge_quality_protocol_runs(self, tmp_path):
        cfg = base_config(tmp_path, protocols=["mge_quality"], n=30, fraction=0.25)
        cfg["model"]["epochs"] = 3
        code = main(["benchmark", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        from ame_lab.benchmark import read_benchmark_csv
        rows = read_benchmark_csv(run_dir_of(tmp_path, cfg) / "benchmark.csv")
        metrics = {r["metric"] for r in rows}
        assert "spearman" in metrics
        assert any(m.endswith("test_mge") for m in metrics)


class TestSweepCommand:
    def sweep_config(self, tmp_path):
        cfg = base_config(tmp_path, alphas=[0.0, 0.1], runs=1)
        cfg["model"]["epochs"] = 2
        cfg["data"]["n_train"] = 150
        return cfg

    def test_cells_plus_aggregates(self, tmp_path, capsys):
        cfg = self.sweep_config(tmp_path)
        code = main(["sweep", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        run_dir = run_dir_of(tmp_path, cfg)
        lines = (run_dir / "sweep.csv").read_text().splitlines()
        assert sum(1 for l in lines if l.startswith("run,")) == 2
        assert sum(1 for l in lines if l.startswith("aggregate,")) == 2

    def test_resume_skips_completed_cells(self, tmp_path, capsys):
        cfg = self.sweep_config(tmp_path)
        path = write_config(tmp_path, cfg)
        main(["sweep", "--config", path])
        capsys.readouterr()
        sweep_bytes = (run_dir_of(tmp_path, cfg) / "sweep.csv").read_bytes()
        code = main(["sweep", "--config", path])
        assert code == 0
        assert "2 already complete" in capsys.readouterr().out
        assert (run_dir_of(tmp_path, cfg) / "sweep.csv").read_bytes() == sweep_bytes

    def test_parallel_jobs_match_sequential_bytes(self, tmp_path):
        cfg = self.sweep_config(tmp_path)
        main(["sweep", "--config", write_config(tmp_path, cfg, "seq.json")])
        sequential = (run_dir_of(tmp_path, cfg) / "sweep.csv").read_bytes()
        par_cfg = dict(cfg, out_dir=str(tmp_path / "par"))
        code = main(["sweep", "--config", write_config(tmp_path, par_cfg, "par.json"),
                     "--jobs", "2"])
        assert code == 0
        parallel = (tmp_path / "par" / run_dir_of(tmp_path, cfg).name / "sweep.csv").read_bytes()
        assert parallel == sequential


class TestOracleCommand:
    def test_writes_simplex_rows(self, tmp_path):
        cfg = base_config(tmp_path)
        cfg["probe"] = {"hidden": [4], "epochs": 5, "learning_rate": 0.01}
        code = main(["oracle", "--config", write_config(tmp_path, cfg)])
        assert code == 0
        lines = (run_dir_of(tmp_path, cfg) / "oracle.csv").read_text().splitlines()
        assert lines[0] == "sample_id,group_1,group_2,group_3,group_4"
        assert len(lines) == 1 + 80
        for line in lines[1:]:
            values = [float(v) for v in line.split(",")[1:]]
            assert abs(sum(values) - 1.0) <= 1e-6


class TestHelpers:
    def test_informative_groups_maps_features_to_groups(self):
        groups = informative_groups([[0, 1], [2], [3, 4]], [1, 4])
        assert groups == {0, 2}

    def test_run_id_ignores_out_dir(self, tmp_path):
        a = RunConfig.from_dict(base_config(tmp_path))
        b = RunConfig.from_dict(base_config(tmp_path, out_dir="elsewhere"))
        assert run_id(a) == run_id(b)

    def test_run_id_tracks_settings(self, tmp_path):
        a = RunConfig.from_dict(base_config(tmp_path))
        changed = base_config(tmp_path)
        changed["model"]["alpha"] = 0.07
        b = RunConfig.from_dict(changed)
        assert run_id(a) != run_id(b)
