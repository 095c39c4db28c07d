"""Tests for configuration discovery, validation and presets."""

import json

import pytest

from flowrft.config import (
    DEFAULT_CONFIG,
    ConfigError,
    ExperimentConfig,
    clear_config_cache,
    create_example_config,
    get_config_paths,
    get_global_config,
    load_config_file,
    load_experiment_config,
    migrate_config,
    resolve_config,
)


class TestResolveConfig:
    def test_defaults(self):
        cfg = ExperimentConfig.default()
        assert cfg.method == "consistent_rft"
        assert cfg.schema_version == 1
        assert cfg.objective == "grpo"
        assert cfg.cpgo().omega == DEFAULT_CONFIG["cpgo_weight"]

    @pytest.mark.parametrize("method, mode, intra, weight", [
        ("grpo", "fine", False, 0.0),
        ("fine", "fine", True, 0.0),
        ("coarse", "coarse", True, 0.0),
        ("dpo", "fine", False, 0.0),
    ])
    def test_method_presets(self, method, mode, intra, weight):
        cfg = ExperimentConfig.default(method=method)
        assert (cfg.schedule_mode, cfg.intra_group, cfg.cpgo_weight) == (mode, intra, weight)

    def test_user_values_beat_presets(self):
        cfg = ExperimentConfig.default(method="grpo", cpgo_weight=0.1)
        assert cfg.cpgo_weight == 0.1

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="Unknown configuration keys: bogus"):
            resolve_config({"bogus": 1})

    @pytest.mark.parametrize("settings, message", [
        ({"group_size": 1}, "Invalid value for 'group_size'"),
        ({"seed": "zero"}, "Invalid type for 'seed'"),
        ({"num_steps": True}, "got bool"),
        ({"method": "ppo"}, "Invalid value for 'method'"),
        ({"timestep_fraction": 0.0}, "timestep_fraction"),
    ])
    def test_field_errors(self, settings, message):
        with pytest.raises(ConfigError, match=message):
            resolve_config(settings)

    @pytest.mark.parametrize("settings, message", [
        ({"group_size": 4, "cluster_size": 5}, "cluster_size must lie in 1..group_size"),
        ({"num_steps": 8, "perception_knot": 9}, "perception_knot must lie in 0..num_steps"),
        ({"schedule_period": 4, "coarse_ratio": 0.0}, "at least one fine and one coarse"),
        ({"num_steps": 8, "diag_knots": [2, 9]}, "diag_knots"),
        ({"reward": {"kind": "quantized", "colour": 1}}, "Invalid reward spec"),
    ])
    def test_cross_field_errors(self, settings, message):
        with pytest.raises(ConfigError, match=message):
            resolve_config(settings)

    def test_pinned_schedule_ignores_ratio(self):
        cfg = ExperimentConfig.default(schedule_mode="fine", coarse_ratio=0.0)
        assert cfg.granularity_schedule().mode == "fine"

    def test_replace_revalidates(self):
        cfg = ExperimentConfig.default()
        assert cfg.replace(seed=3).seed == 3
        with pytest.raises(ConfigError):
            cfg.replace(group_size=0)

    def test_replace_method_applies_new_preset(self):
        cfg = ExperimentConfig.default()
        grpo = cfg.replace(method="grpo")
        assert (grpo.schedule_mode, grpo.intra_group, grpo.cpgo_weight) == ("fine", False, 0.0)
        back = grpo.replace(method="consistent_rft")
        assert (back.schedule_mode, back.intra_group, back.cpgo_weight) == ("dynamic", True, 1e-6)

    def test_replace_method_keeps_user_choices(self):
        cfg = ExperimentConfig.default(cpgo_weight=0.5)
        coarse = cfg.replace(method="coarse")
        assert (coarse.schedule_mode, coarse.cpgo_weight) == ("coarse", 0.5)
        assert cfg.replace(method="grpo", intra_group=True).intra_group is True

    def test_typed_helpers(self):
        cfg = ExperimentConfig.default(num_steps=10, n_modes=3, hidden_widths=[8])
        assert cfg.grid().T == 10
        assert cfg.arch().n_conditions == 3
        assert cfg.arch().hidden_widths == (8,)
        assert cfg.reward_spec().n_modes == 3
        assert cfg.checkpoint_path.name == "pretrained.ckpt"


class TestMigration:
    def test_unversioned_file_is_upgraded(self):
        assert migrate_config({"seed": 1})["schema_version"] == 1

    def test_comment_keys_dropped(self):
        assert "_comment" not in migrate_config({"_comment": "hi", "seed": 1})

    def test_newer_schema_rejected(self):
        with pytest.raises(ConfigError, match="newer than supported"):
            migrate_config({"schema_version": 99})


class TestConfigFiles:
    """Loading from rc, JSON and YAML files."""

    def test_missing_file_is_empty(self, tmp_path):
        assert load_config_file(tmp_path / "nope.json") == ({}, None)

    def test_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 7, "eta": 0.5}))
        config, error = load_config_file(path)
        assert error is None
        assert config["seed"] == 7

    def test_rc_file(self, tmp_path):
        path = tmp_path / ".flowrftrc"
        path.write_text("# comment\nseed = 4\nmethod = grpo\nhidden_widths = [8, 8]\n")
        config, error = load_config_file(path)
        assert error is None
        assert config["seed"] == 4 and config["method"] == "grpo" and config["hidden_widths"] == [8, 8]

    def test_rc_line_without_equals(self, tmp_path):
        path = tmp_path / ".flowrftrc"
        path.write_text("seed 4\n")
        _, error = load_config_file(path)
        assert "expected key=value" in error

    def test_yaml_file(self, tmp_path):
        pytest.importorskip("yaml")
        path = tmp_path / "flowrft.config.yaml"
        path.write_text("seed: 5\nreward:\n  kind: quantized\n  q: 0.25\n")
        config, error = load_config_file(path)
        assert error is None
        assert config["reward"] == {"kind": "quantized", "q": 0.25}

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        _, error = load_config_file(path)
        assert error.startswith("Invalid JSON in bad.json")

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"colour": "red"}))
        _, error = load_config_file(path)
        assert "Unknown configuration keys in cfg.json: colour" in error

    def test_example_config_loads(self, tmp_path):
        path = tmp_path / "example.json"
        path.write_text(create_example_config())
        config, error = load_config_file(path)
        assert error is None
        assert ExperimentConfig.from_dict(config).method == "consistent_rft"

    def test_example_config_follows_edited_method(self, tmp_path):
        data = json.loads(create_example_config())
        data["method"] = "grpo"
        path = tmp_path / "example.json"
        path.write_text(json.dumps(data))
        config, error = load_config_file(path)
        assert error is None
        cfg = ExperimentConfig.from_dict(config)
        assert (cfg.schedule_mode, cfg.intra_group, cfg.cpgo_weight) == ("fine", False, 0.0)


class TestDiscovery:
    def test_search_order(self, tmp_path):
        paths = get_config_paths()
        assert paths[0].name == ".flowrftrc"
        assert paths[0].parent.samefile(tmp_path)
        assert paths[-1].parent == tmp_path / "home"

    def test_working_directory_beats_home(self, tmp_path):
        (tmp_path / "home" / ".flowrft.json").write_text(json.dumps({"seed": 1, "eta": 0.2}))
        (tmp_path / ".flowrft.json").write_text(json.dumps({"seed": 2}))
        clear_config_cache()
        config, error = get_global_config()
        assert error is None
        assert config == {"schema_version": 1, "seed": 2, "eta": 0.2}

    def test_errors_are_collected(self, tmp_path):
        (tmp_path / ".flowrft.json").write_text("[1, 2]")
        clear_config_cache()
        _, error = get_global_config()
        assert "expected a mapping" in error

    def test_overrides_win(self, tmp_path):
        (tmp_path / ".flowrft.json").write_text(json.dumps({"seed": 2}))
        clear_config_cache()
        cfg = load_experiment_config(overrides={"seed": 9, "eta": None})
        assert cfg.seed == 9
        assert cfg.eta == DEFAULT_CONFIG["eta"]

    def test_explicit_path_must_exist(self, tmp_path):
        with pytest.raises(ConfigError, match="config file not found"):
            load_experiment_config(tmp_path / "missing.json")

    def test_invalid_discovered_file_is_fatal(self, tmp_path):
        (tmp_path / ".flowrft.json").write_text(json.dumps({"group_size": "six"}))
        clear_config_cache()
        with pytest.raises(ConfigError, match="group_size"):
            load_experiment_config()
