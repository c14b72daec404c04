"""Run manifests: what was run, on which inputs, and how it ended."""

import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from pydantic import BaseModel, Field


logger = logging.getLogger(__name__)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def hash_inputs(paths: Sequence[Union[str, Path]], config_echo: Dict[str, Any]) -> str:
    """BLAKE2b over the canonical config JSON followed by each input file's bytes."""
    digest = hashlib.blake2b(digest_size=16)
    digest.update(json.dumps(config_echo, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    for p in paths:
        path = Path(p)
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


class RunManifest(BaseModel):
    """Enough to re-execute a run: command, config, seed and input hash.

    Timings are informational and never part of reproducible outputs.
    """

    command: str
    config: Dict[str, Any]
    seed: int
    input_hash: str
    inputs: List[str] = Field(default_factory=list)
    started_at: str = Field(default_factory=utc_now)
    finished_at: Optional[str] = None
    outcome: str = "running"
    epoch_seconds: List[float] = Field(default_factory=list)

    def finish(self, outcome: str, epoch_seconds: Optional[Sequence[float]] = None) -> "RunManifest":
        return self.model_copy(
            update={
                "finished_at": utc_now(),
                "outcome": outcome,
                "epoch_seconds": list(epoch_seconds) if epoch_seconds is not None else self.epoch_seconds,
            }
        )


def write_manifest(path: Union[str, Path], manifest: RunManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.debug(f"Wrote manifest to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
