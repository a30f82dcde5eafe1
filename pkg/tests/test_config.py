import json

import numpy as np
import pytest

from robustsls.config import (ConfigError, DEFAULT_CONFIG, RunManifest,
                              build_setup, config_hash, load_config)


def test_defaults_load_and_validate():
    cfg = load_config(None)
    assert cfg == load_config({})
    assert cfg["horizon"] == 20
    assert cfg["robustness"]["eps_w"] == 0.05
    assert cfg["cost"]["q"] == [1.0, 1.0, 1.0, 4.0, 4.0, 4.0]


def test_partial_config_deep_merges():
    cfg = load_config({"horizon": 10, "reference": {"laps": 1}})
    assert cfg["horizon"] == 10
    assert cfg["reference"]["laps"] == 1
    assert cfg["reference"]["period"] == DEFAULT_CONFIG["reference"]["period"]
    # defaults untouched
    assert DEFAULT_CONFIG["horizon"] == 20


def test_schema_rejects_bad_values():
    with pytest.raises(ConfigError):
        load_config({"horizon": 1})
    with pytest.raises(ConfigError):
        load_config({"system": {"dt": -0.1}})
    with pytest.raises(ConfigError):
        load_config({"unknown_section": {}})
    with pytest.raises(ConfigError):
        load_config({"cost": {"kind": "quadratic"}})


def test_load_config_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"horizon": 12}))
    assert load_config(str(path))["horizon"] == 12
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2, 3]")
    with pytest.raises(ConfigError):
        load_config(str(arr))


def test_config_hash_stable_and_sensitive():
    a = load_config(None)
    b = load_config({"horizon": 20})
    c = load_config({"horizon": 10})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_build_setup_dimensions():
    setup = build_setup(load_config(None))
    assert setup.system.n == 6 and setup.system.m == 3 and setup.system.p == 6
    assert setup.horizon == 20
    assert setup.controller_horizon == 160  # max(160, 2 * horizon)
    assert setup.steps == setup.reference.steps == 300
    assert setup.error_model is None
    assert setup.perception.lipschitz_bound() == pytest.approx(0.288)


def test_build_setup_controller_horizon_override():
    setup = build_setup(load_config({"controller_horizon": 40}))
    assert setup.controller_horizon == 40
    setup = build_setup(load_config({"horizon": 100}))
    assert setup.controller_horizon == 200


def test_explicit_error_model_requires_both_fields():
    with pytest.raises(ConfigError):
        build_setup(load_config({"error_model": {"s_explicit": 0.1}}))
    setup = build_setup(load_config(
        {"error_model": {"s_explicit": 0.1, "eps_e_explicit": 0.2}}))
    assert setup.error_model.s_hat == 0.1
    assert setup.error_model.epsilon_e == 0.2


def test_perception_dimension_mismatch_rejected():
    with pytest.raises(ConfigError):
        build_setup(load_config({"perception": {
            "bias_amplitudes": [0.1, 0.1],
            "bias_frequencies": [1.0, 1.0],
            "bias_directions": [[1.0, 0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0, 0]],
            "bias_phases": [0.0, 0.0]}}))


def test_manifest_sorted_artifacts(tmp_path):
    man = RunManifest(config_hash="abc")
    man.add("b.json")
    man.add("a.csv")
    doc = json.loads(man.to_json())
    assert doc["artifacts"] == ["a.csv", "b.json"]
    assert doc["config_hash"] == "abc"
    assert doc["timestamp"]
    path = tmp_path / "manifest.json"
    man.write(path)
    assert json.loads(path.read_text())["artifacts"] == ["a.csv", "b.json"]
