"""Dataset ingestion and synthesis."""

from workbench.data.container import (
    DatasetContainer,
    DatasetFormatError,
    Split,
    load_dataset,
    save_dataset,
)
from workbench.data.synthetic import SyntheticKind, generate_synthetic

__all__ = [
    "DatasetContainer",
    "DatasetFormatError",
    "Split",
    "SyntheticKind",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
]
