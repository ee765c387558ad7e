from __future__ import annotations

from pathlib import Path

import pytest

from llmrescore.config import (
    ConcurrencyPolicy,
    FusionConfig,
    config_from_dict,
    config_to_dict,
    load_config,
)


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "cfg.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_shipped_defaults_load() -> None:
    config = load_config(env={})
    assert config.fusion.lambda_lm == 0.5
    assert config.batch.max_in_flight == 4
    assert config.pipeline.history == "one-by-one"
    assert config.h2t.lambda_mse == 0.01
    assert config.llm.endpoint == ""


def test_file_overrides_and_seed_propagates(tmp_path: Path) -> None:
    path = _write(tmp_path, '[general]\nseed = 7\n[fusion]\nlambda_lm = 2.0\n[llm]\nendpoint = "http://file"\n')
    config = load_config(path, env={"LLM_ENDPOINT": "http://env"})
    assert config.seed == 7
    assert config.batch.seed == 7
    assert config.fusion.lambda_lm == 2.0
    # File wins over environment
    assert config.llm.endpoint == "http://file"


def test_environment_fills_endpoint_and_key(tmp_path: Path) -> None:
    path = _write(tmp_path, "")
    config = load_config(path, env={"LLM_ENDPOINT": "http://env", "LLM_API_KEY": "sk-secret"})
    assert config.llm.endpoint == "http://env"
    assert config.llm.api_key == "sk-secret"
    assert "sk-secret" not in repr(config)


def test_echo_drops_api_key_and_round_trips() -> None:
    config = load_config(env={"LLM_API_KEY": "sk-secret"})
    echo = config_to_dict(config)
    assert "api_key" not in echo["llm"]
    again = config_from_dict(echo, env={})
    assert config_to_dict(again) == echo


def test_invalid_values_rejected() -> None:
    with pytest.raises(ValueError):
        ConcurrencyPolicy(max_in_flight=0)
    with pytest.raises(ValueError):
        FusionConfig(lambda_lm=float("inf"))
    with pytest.raises(ValueError):
        FusionConfig(lambda_lm=-1.0)
