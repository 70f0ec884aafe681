import json

import pytest

from latentfuse.config import (
    SEED_ENV,
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    load_config,
    resolve_seed,
)


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.dataset.n_samples == 10_000 and cfg.dataset.signal_dim == 32
    assert cfg.dataset_path.name == "dataset.bin" and cfg.checkpoint_path.name == "model.json"


def test_dict_roundtrip_preserves_digest():
    cfg = ExperimentConfig(seed=5)
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.digest() == cfg.digest()
    assert ExperimentConfig(seed=6).digest() != cfg.digest()


@pytest.mark.parametrize("doc", [
    {"colour": 1},
    {"dataset": {"n_sampels": 10}},
    {"fusion": {"lambda": 1.0}},
    {"eval": {"baseline": {"momentum": 0.9}}},
    {"samplers": [{"kind": "identity", "sigma": 0.1}, None]},
])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc).validate()


@pytest.mark.parametrize("doc", [
    {"samplers": [{"kind": "random_projection", "n_measurements": 33}, None]},
    {"samplers": [{"kind": "mask", "missing_ratio": 1.2}, None]},
    {"samplers": [None, None]},
    {"samplers": [{"kind": "identity"}]},
    {"version": 2},
    {"seed": -1},
])
def test_impossible_settings_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc).validate()


def test_load_config_errors(tmp_path):
    assert load_config(None).seed == 0
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.json")


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed(None, 3) == 3
    monkeypatch.setenv(SEED_ENV, "11")
    assert resolve_seed(None, 3) == 11
    assert resolve_seed(7, 3) == 7
    monkeypatch.setenv(SEED_ENV, "eleven")
    with pytest.raises(ConfigError):
        resolve_seed(None, 3)
