import json

import pytest

from denseclpp.config import (
    ExperimentConfig,
    apply_overrides,
    default_config,
    default_config_text,
    from_dict,
    load_config,
    parse_config,
)
from denseclpp.encoder import ConfigError


def test_bundled_default_matches_code_defaults():
    assert default_config() == ExperimentConfig()
    assert json.loads(default_config_text()) == json.loads(ExperimentConfig().to_json())


def test_round_trip():
    cfg = apply_overrides(ExperimentConfig(), ['train.method="densecl"', "train.decoder={}"])
    assert parse_config(cfg.to_json()) == cfg


def test_unknown_key_named():
    data = ExperimentConfig().to_dict()
    data["train"]["epoch"] = 3
    with pytest.raises(ConfigError, match="unknown config key train.epoch"):
        from_dict(data)


def test_malformed_json_location():
    with pytest.raises(ConfigError, match="line 2, column"):
        parse_config('{\n  "version": 1,,\n}')


def test_missing_file(tmp_path):
    path = tmp_path / "absent.json"
    with pytest.raises(FileNotFoundError, match="absent.json"):
        load_config(path)


def test_version_checked():
    with pytest.raises(ConfigError, match="version"):
        from_dict({"version": 2})


def test_partial_config_fills_defaults():
    cfg = from_dict({"train": {"epochs": 3}})
    assert cfg.train.epochs == 3 and cfg.train.batch_size == ExperimentConfig().train.batch_size


def test_image_size_consistency():
    with pytest.raises(ConfigError, match="image_size"):
        from_dict({"data": {"image_size": 16}})


def test_override_bad_key():
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), ["train.nope.x=1"])
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), ["train.epochs"])


def test_invalid_value_reports_section():
    with pytest.raises(ConfigError, match="train"):
        apply_overrides(ExperimentConfig(), ['train.method="byol"'])
