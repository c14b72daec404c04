"""Operational shell around the search and evaluation engines.

Subpackages:
- config: run configuration (TOML file, environment, overrides)
- data: dataset container format and synthetic generators
- storage: checkpoints and run manifests
- reporting: CSV exports
"""

__version__ = "0.1.0"
