"""Process-wide settings loaded from the environment, .env and an optional TOML file."""

import logging
import re
from pathlib import Path
from typing import Optional

from pydantic import AliasChoices, BaseModel, Field, SecretStr, ValidationError
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from app.utils.errors import ConfigError

logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).resolve().parent.parent / "prompts"

DEFAULT_SHELL_MARKERS = [
    r"Meterpreter session .* (?:opened|established)",
    r"Command shell session .* opened",
    r"reverse shell .* established",
]


class PriceTable(BaseModel):
    """USD per one million tokens."""
    input_per_mtok: float = Field(default=2.50, ge=0.0)
    output_per_mtok: float = Field(default=10.00, ge=0.0)

    def dollars(self, tokens_in: int, tokens_out: int) -> float:
        return (tokens_in * self.input_per_mtok + tokens_out * self.output_per_mtok) / 1_000_000


class AppSettings(BaseSettings):
    """Application configuration model."""
    model_config = SettingsConfigDict(
        env_prefix="PENTEST_",
        env_file=".env",
        env_file_encoding="utf-8",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="ignore",
    )

    # Service
    service_name: str = "IP-to-Shell Pentest Orchestrator"
    service_version: str = "1.0.0"
    log_level: str = "INFO"

    # Model endpoint
    llm_base_url: str = "https://api.openai.com/v1"
    llm_model: str = "gpt-4o"
    llm_temperature: float = 0.2
    llm_request_timeout_sec: float = 120.0
    llm_api_key: Optional[SecretStr] = Field(
        default=None,
        validation_alias=AliasChoices("PENTEST_LLM_API_KEY", "OPENAI_API_KEY"),
    )
    prices: PriceTable = Field(default_factory=PriceTable)
    prompts_dir: Path = PROMPTS_DIR

    # Act policies
    default_timeout_sec: int = Field(default=30, gt=0)
    timeout_overrides: dict[str, int] = Field(default_factory=dict)
    max_timeout_sec: int = Field(default=600, gt=0)
    max_attempts: int = Field(default=3, ge=1)
    output_cap_bytes: int = Field(default=64 * 1024, gt=0)
    shell_markers: list[str] = Field(default_factory=lambda: list(DEFAULT_SHELL_MARKERS))
    env_passthrough: list[str] = Field(default_factory=lambda: ["PATH", "HOME", "LANG", "TERM"])

    # Retrieval
    techniques_k: int = Field(default=4, gt=0)
    success_cases_k: int = Field(default=1, gt=0)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            TomlConfigSettingsSource(settings_cls),
            file_secret_settings,
        )

    def timeout_for(self, command: str) -> int:
        """Initial timeout for a command, honouring per-class overrides."""
        for pattern, seconds in self.timeout_overrides.items():
            if re.search(pattern, command):
                return seconds
        return self.default_timeout_sec


def load_settings(config_path: Optional[Path] = None, **overrides) -> AppSettings:
    """Build settings, layering a TOML file under env and .env when given."""
    try:
        if config_path is None:
            return AppSettings(**overrides)
        if not Path(config_path).is_file():
            raise ConfigError(f"config file not found: {config_path}")

        class FileSettings(AppSettings):
            model_config = SettingsConfigDict(toml_file=str(config_path))

        logger.info(f"Loading settings from {config_path}")
        return FileSettings(**overrides)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid settings: {e}") from e
