"""Run configuration for the search workbench."""

from workbench.config.settings import (
    DataConfig,
    WorkbenchSettings,
    create_settings,
)

__all__ = [
    "DataConfig",
    "WorkbenchSettings",
    "create_settings",
]
