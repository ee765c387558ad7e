from __future__ import annotations

import math
import os
import tomllib
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

_DEFAULT_CONFIG = Path(__file__).resolve().parents[2] / "config" / "default.toml"

DEFAULT_STRIP_CHARS = '.,?!;:"'


@dataclass(frozen=True)
class NormConfig:
    lowercase: bool = True
    strip_chars: str = DEFAULT_STRIP_CHARS


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = ""
    model_name: str = "gpt-3.5-turbo-instruct"
    temperature: float = 0.0
    max_tokens: int = 512
    timeout_sec: float = 60.0
    api_key: str = field(default="", repr=False)


@dataclass(frozen=True)
class ConcurrencyPolicy:
    max_in_flight: int = 4
    max_attempts: int = 5
    backoff_base_sec: float = 1.0
    backoff_factor: float = 2.0
    fail_fast: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")


@dataclass(frozen=True)
class FusionConfig:
    lambda_lm: float = 0.5
    use_acoustic: bool = True

    def __post_init__(self) -> None:
        if not math.isfinite(self.lambda_lm) or self.lambda_lm < 0:
            raise ValueError(f"lambda_lm must be finite and >= 0, got {self.lambda_lm}")


@dataclass(frozen=True)
class PipelineConfig:
    correction_mode: str = "augment"  # 'augment' | 'replace'
    history: str = "one-by-one"  # 'one-by-one' | 'accumulate'
    tap_mode: str = "replay"  # 'replay' | 'live'
    domain: str = "the target domain"
    template_version: str = "v1"
    max_turns: int = 0  # 0 = no cap
    max_fallback_rate: float = 0.2


@dataclass(frozen=True)
class H2TSettings:
    lambda_mse: float = 0.01


@dataclass(frozen=True)
class NgramSettings:
    oov: str = "unk"  # 'unk' | 'error'
    add_markers: bool = True


@dataclass(frozen=True)
class Config:
    log_level: str = "info"
    seed: int = 0
    normalize: NormConfig = field(default_factory=NormConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    batch: ConcurrencyPolicy = field(default_factory=ConcurrencyPolicy)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    h2t: H2TSettings = field(default_factory=H2TSettings)
    ngram: NgramSettings = field(default_factory=NgramSettings)


def load_config(path: Path | None = None, env: Mapping[str, str] | None = None) -> Config:
    """Load a TOML config file on top of environment defaults.

    Precedence is file > environment here; CLI flags are applied on top by
    the caller. The API key only ever comes from the environment.
    """
    env = os.environ if env is None else env
    raw: dict = {}
    if path is not None or _DEFAULT_CONFIG.exists():
        with open(path or _DEFAULT_CONFIG, "rb") as f:
            raw = tomllib.load(f)

    general = raw.get("general", {})
    llm_raw = dict(raw.get("llm", {}))

    # Endpoint: file wins, environment fills the gap
    if not llm_raw.get("endpoint"):
        llm_raw["endpoint"] = env.get("LLM_ENDPOINT", "")
    llm_raw["api_key"] = env.get("LLM_API_KEY", "")

    seed = general.get("seed", 0)
    return Config(
        log_level=general.get("log_level", "info"),
        seed=seed,
        normalize=NormConfig(**raw.get("normalize", {})),
        llm=LlmConfig(**llm_raw),
        batch=ConcurrencyPolicy(**{"seed": seed, **raw.get("batch", {})}),
        fusion=FusionConfig(**raw.get("fusion", {})),
        pipeline=PipelineConfig(**raw.get("pipeline", {})),
        h2t=H2TSettings(**raw.get("h2t", {})),
        ngram=NgramSettings(**raw.get("ngram", {})),
    )


def config_to_dict(config: Config) -> dict:
    """JSON-ready echo of the effective config, without secrets."""
    data = asdict(config)
    data["llm"].pop("api_key", None)
    return data


def config_from_dict(data: Mapping, env: Mapping[str, str] | None = None) -> Config:
    env = os.environ if env is None else env
    llm_raw = dict(data.get("llm", {}))
    llm_raw["api_key"] = env.get("LLM_API_KEY", "")
    return Config(
        log_level=data.get("log_level", "info"),
        seed=data.get("seed", 0),
        normalize=NormConfig(**data.get("normalize", {})),
        llm=LlmConfig(**llm_raw),
        batch=ConcurrencyPolicy(**data.get("batch", {})),
        fusion=FusionConfig(**data.get("fusion", {})),
        pipeline=PipelineConfig(**data.get("pipeline", {})),
        h2t=H2TSettings(**data.get("h2t", {})),
        ngram=NgramSettings(**data.get("ngram", {})),
    )
