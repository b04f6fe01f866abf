import json

import pytest

from allinone.config import ExperimentConfig, load_config, parse_config
from allinone.errors import ConfigError
from allinone.trainer import TrainConfig


def test_defaults_round_trip():
    cfg = parse_config({})
    assert isinstance(cfg.train, TrainConfig)
    assert parse_config(cfg.to_dict()) == cfg


def test_nested_values_are_validated():
    cfg = parse_config({"train": {"targets": [1.0, 0.5], "gamma": 3}, "data": {"train_subset": 100}})
    assert cfg.train.n_switches == 2 and cfg.data.train_subset == 100


@pytest.mark.parametrize("raw", [
    {"unknown": 1}, {"train": {"lr": 0.1}}, {"train": {"targets": [0.5, 0.9]}},
    {"data": {"train_subset": "many"}}, {"dvfs": {"clocks": "fast"}}, {"train": {"lr_decay": "step"}}])
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "ok.json").write_text(json.dumps({"output": "x", "plots": True}))
    cfg = load_config(tmp_path / "ok.json")
    assert isinstance(cfg, ExperimentConfig) and cfg.plots


def test_bundled_configs_parse():
    from pathlib import Path
    for path in sorted((Path(__file__).parents[1] / "configs").glob("*.json")):
        load_config(path)
