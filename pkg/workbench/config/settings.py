"""Run configuration for the search workbench.

Settings are read from several sources in order of precedence:
1. Direct parameters (highest priority)
2. Environment variables (ZODARTS_THREADS, ZODARTS_SEARCH__EPOCHS, ...)
3. .env file
4. TOML run-config file (zodarts.toml by default)
5. Preset and default values (lowest priority)

The run-config file uses `[section]` headers and `key = value` lines:

    preset = "ci"

    [supernet]
    num_stages = 2
    cells_per_stage = 2
    base_channels = 8

    [search]
    c_upper = 20000

Unknown keys in any section are rejected.

Example:
    >>> from workbench.config.settings import create_settings
    >>>
    >>> settings = create_settings(config_file="configs/ci.toml")
    >>> settings.search.theta
    4
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from lib.arch_eval import CampaignConfig, RetrainConfig
from lib.supernet import SupernetConfig
from lib.zo_search import SearchConfig


logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "zodarts.toml"

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "full": {"search": {"epochs": 50, "theta": 20, "inner_steps": 10}},
    "ci": {
        "search": {
            "epochs": 10,
            "theta": 4,
            "inner_steps": 2,
            "anneal_factor": 0.4,
            "anneal_interval": 1,
            "lr_alpha": 0.05,
        }
    },
}


class DataConfig(BaseModel):
    """Dataset container paths.

    Attributes:
        train: Training container; split into search train/val halves when `val` is unset
        val: Optional separate validation container
        test: Test container used after retraining
        split: Fraction of `train` kept for training when splitting
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    train: Optional[Path] = None
    val: Optional[Path] = None
    test: Optional[Path] = None
    split: float = Field(default=0.5, gt=0, lt=1)


class WorkbenchSettings(BaseSettings):
    """Complete run configuration.

    Environment variables use the `ZODARTS_` prefix with `__` between
    section and key (e.g. ZODARTS_SEARCH__SEED=3).

    Attributes:
        preset: "full" or "ci" search defaults, applied below file values
        supernet: Structure of the searchable network
        search: Bilevel search hyperparameters
        data: Dataset locations
        retrain: Standalone retraining of sampled architectures
        evaluation: Sampling campaign across searched supernets
        threads: Worker processes for retraining fan-out
    """

    preset: Optional[Literal["full", "ci"]] = None
    supernet: SupernetConfig = SupernetConfig()
    search: SearchConfig = SearchConfig()
    data: DataConfig = DataConfig()
    retrain: RetrainConfig = RetrainConfig()
    evaluation: CampaignConfig = CampaignConfig()
    threads: int = Field(default=1, ge=1)

    model_config = SettingsConfigDict(
        env_prefix="ZODARTS_",
        env_nested_delimiter="__",
        env_file=".env",
        toml_file=DEFAULT_CONFIG_FILE,
        extra="forbid",
        case_sensitive=False,
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # Order: Direct params, env vars, .env file, TOML file
        return (
            init_settings,
            env_settings,
            dotenv_settings,
            TomlConfigSettingsSource(settings_cls),
        )

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        if not isinstance(data, dict) or not data.get("preset"):
            return data
        preset = PRESETS.get(str(data["preset"]))
        if preset is None:
            return data
        merged = dict(data)
        for section, values in preset.items():
            current = merged.get(section)
            if current is None or isinstance(current, dict):
                merged[section] = {**values, **(current or {})}
        return merged

    def echo(self) -> Dict[str, Any]:
        """JSON-ready dump used by checkpoints and run manifests."""
        return self.model_dump(mode="json")


def create_settings(config_file: Optional[str] = None, **overrides: Any) -> WorkbenchSettings:
    """Create settings from a run-config file plus direct overrides.

    Args:
        config_file: Path to the TOML run-config (default: zodarts.toml if present)
        **overrides: Top-level fields (e.g. threads=4, search=SearchConfig(...))

    Returns:
        Configured WorkbenchSettings instance

    Raises:
        pydantic.ValidationError: On unknown keys or out-of-range values
    """
    init_kwargs = {k: v for k, v in overrides.items() if v is not None}

    if config_file and Path(config_file).exists():

        class CustomSettings(WorkbenchSettings):
            model_config = SettingsConfigDict(
                env_prefix="ZODARTS_",
                env_nested_delimiter="__",
                env_file=".env",
                toml_file=config_file,
                extra="forbid",
                case_sensitive=False,
            )

        return CustomSettings(**init_kwargs)

    if config_file:
        logger.warning(f"Config file not found: {config_file}. Using default configuration sources.")
    return WorkbenchSettings(**init_kwargs)
