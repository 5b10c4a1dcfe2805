import os

import pytest

from config import config_from_mapping, config_keys, default_config, load_config
from helpers import ConfigError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_YAML = os.path.join(ROOT, "configs", "default.yaml")


def _write(tmp_path, text):
    path = tmp_path / "cfg.yaml"
    path.write_text(text, encoding="utf-8")
    return path


def test_default_yaml_matches_built_in_defaults():
    config = load_config(DEFAULT_YAML)
    assert config.sampler.n == 50 and config.sampler.Q == 2
    assert config.sampler.theta_ranges == ((10.0, 50.0), (50.0, 100.0))
    assert config.econ.R_max == 3000.0
    assert config.diffusion.T == 8 and config.diffusion.learning_starts == 256
    assert config.experiment.seeds == (0, 1, 2)
    assert config.config_hash == default_config().config_hash


def test_flat_view_covers_every_known_key():
    assert set(default_config().flat()) == set(config_keys())


def test_hash_tracks_values():
    base = default_config()
    assert base.config_hash == default_config().config_hash
    assert base.with_experiment(steps=10).config_hash != base.config_hash
    assert base.with_experiment(steps=10).experiment.steps == 10


def test_unknown_key_reports_its_line(tmp_path):
    path = _write(tmp_path, "market.n: 50\nmarket.colour: red\n")
    with pytest.raises(ConfigError, match=r"cfg\.yaml:2: unknown key 'market\.colour'"):
        load_config(path)


def test_nested_mapping_is_rejected(tmp_path):
    path = _write(tmp_path, "# comment\nmarket:\n  n: 50\n")
    with pytest.raises(ConfigError, match=r"cfg\.yaml:2: nested mapping"):
        load_config(path)


def test_duplicate_key_is_rejected(tmp_path):
    path = _write(tmp_path, "diffusion.T: 8\ndiffusion.T: 4\n")
    with pytest.raises(ConfigError, match="duplicate key"):
        load_config(path)


def test_wrong_type_reports_its_line(tmp_path):
    path = _write(tmp_path, "ppo.lr: 0.001\ndiffusion.T: eight\n")
    with pytest.raises(ConfigError, match=r"cfg\.yaml:2: bad value for 'diffusion\.T'"):
        load_config(path)
    with pytest.raises(ConfigError, match="expected an integer"):
        load_config(_write(tmp_path, "market.n: true\n"))


def test_overlapping_theta_ranges_name_field_and_line(tmp_path):
    path = _write(tmp_path, "market.n: 50\n\nmarket.theta_ranges: [[10, 60], [50, 100]]\n")
    with pytest.raises(ConfigError, match=r"cfg\.yaml:3: market\.theta_ranges overlap"):
        load_config(path)


def test_out_of_range_value_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match=r"cfg\.yaml:1: .*econ\.f"):
        load_config(_write(tmp_path, "econ.f: -1\n"))
    with pytest.raises(ConfigError, match="experiment.algo"):
        load_config(_write(tmp_path, "experiment.algo: sac\n"))


def test_reward_cap_is_derived_when_omitted(tmp_path):
    config = load_config(_write(tmp_path, "market.theta_ranges: [[10, 50], [50, 200]]\n"))
    assert config.econ.R_max == 6000.0
    explicit = load_config(_write(tmp_path, "econ.R_max: 100\n"))
    assert explicit.econ.R_max == 100.0


def test_scientific_notation_and_integers_read_as_floats(tmp_path):
    config = load_config(_write(tmp_path, "diffusion.lr: 1e-3\necon.e1: 30\n"))
    assert config.diffusion.lr == 0.001
    assert isinstance(config.econ.e1, float)


def test_empty_file_gives_defaults(tmp_path):
    assert load_config(_write(tmp_path, "")).config_hash == default_config().config_hash


def test_invalid_yaml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(_write(tmp_path, "market.n: [1, 2\n"))
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError, match="must be a mapping"):
        load_config(_write(tmp_path, "- 1\n- 2\n"))


def test_mapping_source_without_lines():
    with pytest.raises(ConfigError, match=r"^<config>: unknown key"):
        config_from_mapping({"nope.x": 1})
