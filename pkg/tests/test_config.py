import numpy as np
import pytest
import yaml

from calibkit.config import (
    ConfigError,
    build_benchmark,
    build_calibration,
    load_config_file,
    resolve_config,
    write_resolved,
)


def base_raw(**overrides):
    raw = {
        "model": {"name": "sphere", "settings": {"dimension": 2}},
        "loss": {"kind": "euclidean", "target": {"kind": "zeros"}},
        "strategy": {"kind": "single", "sampler": "RND"},
        "budget": {"n_batches": 3, "n_steps": 10},
        "seeds": {"master_seed": 1},
        "output": {"workers": 1},
    }
    raw.update(overrides)
    return raw


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="config.bogus: unknown key"):
            resolve_config(base_raw(bogus={}))

    def test_unknown_nested_key_has_full_path(self):
        raw = base_raw()
        raw["budget"]["walltime"] = 10
        with pytest.raises(ConfigError, match="budget.walltime: unknown key"):
            resolve_config(raw)

    def test_unknown_sampler_id(self):
        raw = base_raw()
        raw["strategy"]["sampler"] = "QQ"
        with pytest.raises(ConfigError, match="unknown sampler id"):
            resolve_config(raw)

    def test_options_for_missing_arm(self):
        raw = base_raw()
        raw["strategy"]["options"] = {"RF": {"n_trees": 5}}
        with pytest.raises(ConfigError, match="strategy.options.RF"):
            resolve_config(raw)

    def test_defaults_filled(self):
        resolved = resolve_config(base_raw())
        assert resolved["budget"]["batch_size"] == 4
        assert resolved["budget"]["ensemble_size"] == 5
        assert resolved["loss"]["weight_floor"] == 1e-12
        assert resolved["strategy"]["epsilon"] == 0.1
        assert resolved["output"]["plots"] is True

    def test_bad_transform_reports_dimension(self):
        raw = base_raw(preprocessing={"objective": ["wiggle"]})
        with pytest.raises(ConfigError, match="preprocessing.objective"):
            resolve_config(raw)

    def test_euclidean_rejects_mismatched_target_length(self):
        raw = base_raw()
        raw["loss"]["target"] = {"kind": "pseudo_true", "params": [0.3, 0.3], "n_steps": 50}
        with pytest.raises(ConfigError, match="loss.target.n_steps"):
            resolve_config(raw)

    def test_benchmark_and_strategy_exclusive(self):
        raw = base_raw()
        raw["benchmark"] = {"strategies": [{"kind": "single", "sampler": "H"}]}
        with pytest.raises(ConfigError, match="not allowed together"):
            resolve_config(raw)
        with pytest.raises(ConfigError, match="not allowed together"):
            resolve_config(raw, benchmark=True)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config_file(tmp_path / "gone.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model: [unclosed")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_config_file(path)


class TestBuild:
    def test_space_override(self):
        raw = base_raw()
        raw["model"]["space"] = {"x1": {"lower": 0.0, "upper": 2.0, "step": 0.5}}
        config = build_calibration(resolve_config(raw))
        assert config.space.dims[0].upper == 2.0
        assert config.space.dims[0].n_points == 5
        assert config.space.dims[1].upper == 1.0  # untouched dimension

    def test_space_override_unknown_dimension(self):
        raw = base_raw()
        raw["model"]["space"] = {"zz": {"lower": 0, "upper": 1}}
        with pytest.raises(ConfigError, match="model.space"):
            build_calibration(resolve_config(raw))

    def test_pseudo_true_params_by_name(self):
        raw = base_raw()
        raw["loss"]["target"] = {"kind": "pseudo_true", "params": {"x1": 0.3, "x2": 0.4}}
        config = build_calibration(resolve_config(raw))
        assert config.target.n_steps == 10
        # sphere value at (0.3, 0.4) is emitted as a constant series
        assert config.target.values[0, 0] == pytest.approx(0.01, abs=1e-12)

    def test_pseudo_true_missing_param(self):
        raw = base_raw()
        raw["loss"]["target"] = {"kind": "pseudo_true", "params": {"x1": 0.3}}
        with pytest.raises(ConfigError, match="missing parameters"):
            build_calibration(resolve_config(raw))

    def test_csv_target(self, tmp_path):
        path = tmp_path / "target.csv"
        path.write_text("objective\n" + "\n".join(["0.0"] * 10) + "\n")
        raw = base_raw()
        raw["loss"]["target"] = {"kind": "csv", "path": str(path)}
        config = build_calibration(resolve_config(raw))
        assert config.target.n_steps == 10

    def test_unknown_model_setting_reports_section(self):
        raw = base_raw()
        raw["model"]["settings"] = {"dimensionality": 2}
        with pytest.raises(ConfigError, match="model"):
            build_calibration(resolve_config(raw))

    def test_benchmark_build(self):
        raw = base_raw()
        del raw["strategy"]
        raw["benchmark"] = {
            "repetitions": 2,
            "strategies": [
                {"kind": "single", "sampler": "H"},
                {"kind": "bandit", "arms": ["RF", "BB"], "epsilon": 0.2},
            ],
        }
        config = build_benchmark(resolve_config(raw, benchmark=True))
        assert config.repetitions == 2
        assert [s.label for s in config.strategies] == ["H", "RL-RF+BB"]
        assert config.strategies[1].epsilon == 0.2
        assert config.seed_schedule == [1, 2]

    def test_resolved_round_trip(self, tmp_path):
        resolved = resolve_config(base_raw())
        path = tmp_path / "resolved.yaml"
        write_resolved(resolved, path)
        again = resolve_config(yaml.safe_load(path.read_text()))
        assert again == resolved

    def test_worker_env_var_default(self, monkeypatch):
        raw = base_raw()
        del raw["output"]["workers"]
        monkeypatch.setenv("CALIBKIT_WORKERS", "3")
        assert resolve_config(raw)["output"]["workers"] == 3
        monkeypatch.setenv("CALIBKIT_WORKERS", "zero")
        with pytest.raises(ConfigError, match="CALIBKIT_WORKERS"):
            resolve_config(raw)
