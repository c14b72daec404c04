"""Checkpoint persistence and run manifests."""

from workbench.storage.checkpoint import (
    Checkpoint,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    checkpoint_from_state,
    load_checkpoint,
    save_checkpoint,
)
from workbench.storage.manifest import RunManifest, hash_inputs, read_manifest, write_manifest

__all__ = [
    "Checkpoint",
    "CheckpointChecksumError",
    "CheckpointError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "RunManifest",
    "checkpoint_from_state",
    "hash_inputs",
    "load_checkpoint",
    "read_manifest",
    "save_checkpoint",
    "write_manifest",
]
