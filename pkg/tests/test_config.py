import json

import pytest

from priordepth.config import (
    KEY_DOCS,
    ConfigError,
    RunConfig,
    all_keys,
    default_flat,
    load_run_config,
    save_run_config,
)


def test_every_key_documented_and_defaulted():
    assert set(KEY_DOCS) == all_keys()
    assert set(default_flat()) == all_keys()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="typo_key"):
        RunConfig.from_flat({"typo_key": 3})


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_flat({"base_lr": -1})
    with pytest.raises(ConfigError):
        RunConfig.from_flat({"preset": "huge"})


def test_toy_preset():
    cfg = RunConfig.from_flat({"preset": "toy"})
    assert cfg.network.n_bins == 16 and cfg.train.batch_size == 2
    assert cfg.network.input_width == 64


def test_seed_reaches_every_section():
    cfg = RunConfig.from_flat({"seed": 5})
    assert cfg.train.seed == cfg.loss.seed == cfg.augment.seed == 5


def test_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 4, "batch_size": 3}))
    cfg = load_run_config(path, {"epochs": 9, "batch_size": None})
    assert cfg.train.epochs == 9 and cfg.train.batch_size == 3
    assert cfg.train.base_lr == 1e-4


def test_round_trip(tmp_path):
    cfg = RunConfig.from_flat({"preset": "toy", "n_bins": 24, "betas": [0.8, 0.99], "data": "d"})
    save_run_config(cfg, tmp_path / "c.json")
    back = load_run_config(tmp_path / "c.json")
    assert back == cfg


def test_unreadable_config(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "c.json")
    (tmp_path / "l.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "l.json")
