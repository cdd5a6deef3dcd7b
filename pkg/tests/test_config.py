import json

import numpy as np
import pytest

from app.config import AppConfig, config_from_dict, config_to_dict, load_config, validate_config


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in ("SATA_CONFIG", "SATA_DTYPE", "SATA_CACHE_PATH"):
        monkeypatch.delenv(key, raising=False)


def test_defaults():
    cfg = load_config()
    assert cfg.backbone.stage_sides == (62, 31, 15)
    assert cfg.tracker.T == 3 and cfg.tracker.S == 3
    assert cfg.cf.lam == 1e-4
    assert cfg.runtime.np_dtype is np.float32


def test_partial_file_keeps_other_defaults(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"tracker": {"T": 2}, "aggregate": {"levels": [0, 1]}}))
    cfg = load_config(str(path))
    assert cfg.tracker.T == 2
    assert cfg.aggregate.levels == (0, 1)
    assert cfg.tracker.alpha == 1.03


def test_config_env_var(tmp_path, monkeypatch):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"cf": {"lam": 0.01}}))
    monkeypatch.setenv("SATA_CONFIG", str(path))
    assert load_config().cf.lam == 0.01


def test_env_overrides_win(tmp_path, monkeypatch):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"runtime": {"dtype": "float32"}}))
    monkeypatch.setenv("SATA_DTYPE", "float64")
    monkeypatch.setenv("SATA_CACHE_PATH", str(tmp_path / "c.db"))
    cfg = load_config(str(path))
    assert cfg.runtime.np_dtype is np.float64
    assert cfg.bench.cache_path == str(tmp_path / "c.db")


@pytest.mark.parametrize("data", [
    {"trackr": {}},
    {"tracker": {"TT": 3}},
])
def test_unknown_keys_are_rejected(data):
    with pytest.raises(ValueError, match="Unknown"):
        config_from_dict(data)


@pytest.mark.parametrize("section, values", [
    ("tracker", {"S": 4}),
    ("train", {"steps_per_epoch": 0}),
    ("tracker", {"alpha": 1.0}),
    ("tracker", {"update_rate": 0.0}),
    ("tracker", {"T": -1}),
    ("tracker", {"patch_side": 63}),
    ("align", {"kernel_side": 4}),
    ("aggregate", {"levels": [3]}),
    ("cf", {"lam": 0.0}),
    ("runtime", {"dtype": "float16"}),
    ("backbone", {"kind": "resnet"}),
])
def test_invalid_values(section, values):
    with pytest.raises(ValueError, match="Invalid configuration"):
        validate_config(config_from_dict({section: values}))


def test_unreadable_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ValueError):
        load_config(str(path))
    with pytest.raises(ValueError):
        load_config(str(tmp_path / "missing.json"))


def test_dict_round_trip():
    cfg = AppConfig()
    assert config_from_dict(config_to_dict(cfg)) == cfg
