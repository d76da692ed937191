#!/usr/bin/env python3
"""
Tests for run-configuration parsing and seed precedence
"""

import json
from pathlib import Path

import pytest

from unlearning.config import SEED_ENV_VAR, RunConfig, config_from_dict, parse_config, resolve_seed
from unlearning.errors import ConfigError


def test_empty_documents_give_defaults(tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("", encoding="utf-8")
    braces = tmp_path / "braces.json"
    braces.write_text("{}", encoding="utf-8")
    assert parse_config(empty) == RunConfig()
    assert parse_config(braces) == RunConfig()
    assert RunConfig().world.concept_budget == 6 * 3 * 8


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\"world\": ", encoding="utf-8")
    with pytest.raises(ConfigError):
        parse_config(bad)
    bad.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        parse_config(bad)


@pytest.mark.parametrize("document, path", [
    ({"refusal": {"top_k": 0}}, "refusal.top_k"),
    ({"world": {"feature_dim": 0}}, "world.feature_dim"),
    ({"training": {"stage1_lr": -1.0}}, "training.stage1_lr"),
    ({"calibration": {"beta_threshold": 1.5}}, "calibration.beta_threshold"),
    ({"world": {"colour": "red"}}, "world.colour"),
    ({"training": {"concept_init": "zeros"}}, "training.concept_init"),
    ({"refusal": {"routing_anchor": 1.5}}, "refusal.routing_anchor"),
    ({"output_dir": "  "}, "output_dir"),
])
def test_violations_name_the_field(document, path):
    with pytest.raises(ConfigError) as info:
        config_from_dict(document)
    assert str(info.value).startswith(path)


def test_cross_field_checks():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"refusal": {"num_refusers": 2, "top_k": 3}})
    assert "top_k" in str(info.value)
    with pytest.raises(ConfigError):
        config_from_dict({"refusal": {"hidden_dim": 5, "heads": 2}})


def test_default_config_file_matches_defaults():
    assert parse_config(Path(__file__).parent / "configs" / "default.json") == RunConfig()


def test_ablation_switches():
    config = config_from_dict({"ablations": {"act": True, "cal": True}})
    assert config.ablations.disabled() == ["act", "cal"]
    assert RunConfig().ablations.disabled() == []


def test_seed_precedence(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "11")
    config = config_from_dict({"seed": 5, "world": {"seed": 2}})
    assert resolve_seed(config, 7).world.seed == 7
    assert resolve_seed(config).world.seed == 5
    assert resolve_seed(config_from_dict({"world": {"seed": 2}})).world.seed == 11
    monkeypatch.delenv(SEED_ENV_VAR)
    resolved = resolve_seed(config_from_dict({"world": {"seed": 2}}))
    assert resolved.world.seed == 2 and resolved.seed == 2


def test_bad_seed_environment(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "abc")
    with pytest.raises(ConfigError):
        resolve_seed(RunConfig())


def test_config_round_trips_through_json(tmp_path):
    config = config_from_dict({"world": {"num_tasks": 2}, "ablations": {"mod": True}})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config.model_dump(mode="json")), encoding="utf-8")
    assert parse_config(path) == config
