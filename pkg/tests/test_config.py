import pytest

from mlbpgd.errors import ConfigError
from mlbpgd.harness.config import (SCENARIOS, apply_overrides, apply_scenario, default_config, load_config,
                                   load_presets, parse_config_text, save_preset)


class TestDefaults:
    @pytest.mark.parametrize("experiment", ["deconv", "tomo", "ddesign", "selftest"])
    def test_defaults_are_valid(self, experiment):
        cfg = default_config(experiment).validate()
        assert cfg.experiment == experiment

    def test_deconv_sizes(self):
        cfg = default_config("deconv")
        assert cfg.fine_side == 63
        assert cfg.sides() == [63, 31, 15]
        assert cfg.smoother_iters == [1, 10, 10]

    def test_tomo_detectors_follow_grid(self):
        assert default_config("tomo").detector_counts() == [63, 31, 15]

    def test_kappa_per_experiment(self):
        assert default_config("deconv").kappa == 0.45
        assert default_config("tomo").kappa == 0.45
        assert default_config("ddesign").kappa == 0.49

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError):
            default_config("sudoku")


class TestConfigFile:
    def test_parse(self):
        values = parse_config_text("# コメント\nlevels = 2\nsmoother_iters = 1, 5  # 末尾のコメント\n\n")
        assert values == {"levels": "2", "smoother_iters": "1, 5"}

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_config_text("levels 2\n")

    def test_load_with_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("grid_exponent = 5\nlevels = 2\nsmoother_iters = 1,4\nkappa = 0.3\nnoisy = no\n",
                        encoding="utf-8")
        cfg = load_config(path, "deconv", {"seed": 7, "output_dir": None})
        assert (cfg.grid_exponent, cfg.levels, cfg.smoother_iters) == (5, 2, [1, 4])
        assert cfg.kappa == 0.3 and cfg.noisy is False and cfg.seed == 7
        assert cfg.output_dir == "output"

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            apply_overrides(default_config(), {"colour": "blue"})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            apply_overrides(default_config(), {"levels": "three"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg", "deconv")


class TestValidation:
    def test_smoother_length(self):
        cfg = default_config("deconv")
        cfg.smoother_iters = [1, 10]
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_even_psf(self):
        with pytest.raises(ConfigError):
            apply_overrides(default_config(), {"psf_dim": 14}).validate()

    def test_tomo_angles_must_divide(self):
        cfg = default_config("tomo")
        cfg.angles = [40, 30, 15]
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_tomo_detector_halving(self):
        cfg = default_config("tomo")
        cfg.detectors = [63, 30, 15]
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_ddesign_top_k(self):
        cfg = default_config("ddesign")
        cfg.top_k = 61
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_ddesign_angle_gap(self):
        cfg = default_config("ddesign")
        cfg.top_k, cfg.min_angle_gap = 9, 4
        cfg.validate()
        cfg.top_k = 10
        with pytest.raises(ConfigError):
            cfg.validate()


class TestScenariosAndPresets:
    def test_all_scenarios_valid(self):
        for name in SCENARIOS:
            cfg = apply_scenario(default_config("deconv"), name).validate()
            assert cfg.psf_dim == SCENARIOS[name]["psf_dim"]

    def test_unknown_scenario(self):
        with pytest.raises(ConfigError):
            apply_scenario(default_config(), "foggy")

    def test_preset_roundtrip(self, tmp_path):
        path = tmp_path / "presets.json"
        assert load_presets(path) == {}
        save_preset(path, "小さい問題", {"grid_exponent": 4, "levels": 2})
        save_preset(path, "既定", {"grid_exponent": 6})
        assert load_presets(path) == {"小さい問題": {"grid_exponent": 4, "levels": 2}, "既定": {"grid_exponent": 6}}

    def test_broken_preset_file(self, tmp_path):
        path = tmp_path / "presets.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_presets(path)
