"""
Checkpoint persistence for search state.

Layout (little-endian):

    magic b"ZCKP" | u32 version | u64 payload length
    payload:
        u32 tensor count
        per tensor: u16 name length | name (UTF-8) | u8 rank | u32 extents | f64 values
        u32 blob length | blob (UTF-8 JSON, sorted keys)
    u64 checksum: BLAKE2b (8-byte digest) over every preceding byte

The u32 tensor count in front of the table and the u32 length in front of
the blob are the only framing fields besides the preamble and checksum.

The tensor table holds every supernet parameter (weights, α, β, γ) and the
optimizer buffers; the blob holds configs, epoch, optimizer counters,
direction-rng state and the trace.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from lib.supernet import SupernetConfig, build_supernet
from lib.tensor_engine import Optimizer
from lib.zo_search import (
    SearchConfig,
    SearchState,
    SearchTrace,
    make_arch_optimizers,
    make_weight_optimizer,
)


logger = logging.getLogger(__name__)

MAGIC = b"ZCKP"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
CHECKSUM = struct.Struct("<Q")


class CheckpointError(Exception):
    """Base exception for checkpoint errors"""

    pass


class CheckpointVersionError(CheckpointError):
    """Raised when the file was written by an unsupported format version"""

    pass


class CheckpointChecksumError(CheckpointError):
    """Raised when the stored checksum does not match the content"""

    pass


class CheckpointTruncatedError(CheckpointError):
    """Raised when the file ends before the declared content"""

    pass


def content_checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass
class Checkpoint:
    """Decoded checkpoint: named tensors plus the JSON state blob."""

    tensors: Dict[str, np.ndarray]
    blob: Dict[str, Any]
    version: int = FORMAT_VERSION

    @property
    def epoch(self) -> int:
        return int(self.blob["epoch"])

    @property
    def supernet_config(self) -> SupernetConfig:
        return SupernetConfig.model_validate(self.blob["supernet"])

    @property
    def search_config(self) -> SearchConfig:
        return SearchConfig.model_validate(self.blob["search"])

    @property
    def trace(self) -> SearchTrace:
        return SearchTrace.from_list(self.blob["trace"])

    def restore(self) -> SearchState:
        """Rebuild the search state (supernet, optimizers, rng, trace)."""
        config = self.search_config
        net = build_supernet(self.supernet_config, seed=0)
        names = set(net.named_tensors())
        net.load_named_arrays({k: v for k, v in self.tensors.items() if k in names})
        weight_optimizer = make_weight_optimizer(config)
        arch_optimizers = make_arch_optimizers(config)
        optimizers: Dict[str, Optimizer] = {"weight": weight_optimizer, **arch_optimizers}
        for key, optimizer in optimizers.items():
            meta = self.blob["optimizers"][key]
            optimizer.state.lr = float(meta["lr"])
            optimizer.state.step = int(meta["step"])
            optimizer.state.buffers = {
                buf: _collect(self.tensors, f"optim.{key}.{buf}.") for buf in meta.get("buffers", [])
            }
        return SearchState(
            config=config,
            net=net,
            epoch=self.epoch,
            weight_optimizer=weight_optimizer,
            arch_optimizers=arch_optimizers,
            rng_state=self.blob["rng"],
            trace=self.trace,
        )


def _collect(tensors: Dict[str, np.ndarray], prefix: str) -> List[np.ndarray]:
    indexed = sorted((int(name[len(prefix) :]), arr) for name, arr in tensors.items() if name.startswith(prefix))
    return [arr.copy() for _, arr in indexed]


def checkpoint_from_state(state: SearchState, extra: Optional[Dict[str, Any]] = None) -> Checkpoint:
    tensors: Dict[str, np.ndarray] = {name: t.data for name, t in state.net.named_tensors().items()}
    optimizers: Dict[str, Optimizer] = {"weight": state.weight_optimizer, **state.arch_optimizers}
    meta: Dict[str, Any] = {}
    for key, optimizer in optimizers.items():
        buffers = sorted(optimizer.state.buffers)
        meta[key] = {"lr": optimizer.state.lr, "step": optimizer.state.step, "buffers": buffers}
        for buf in buffers:
            for i, arr in enumerate(optimizer.state.buffers[buf]):
                tensors[f"optim.{key}.{buf}.{i}"] = arr
    blob = {
        "epoch": state.epoch,
        "rng": state.rng_state,
        "optimizers": meta,
        "supernet": state.net.config.model_dump(mode="json"),
        "search": state.config.model_dump(mode="json"),
        "trace": state.trace.to_list(),
    }
    if extra:
        blob["extra"] = extra
    return Checkpoint(tensors=tensors, blob=blob)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    parts = [struct.pack("<I", len(checkpoint.tensors))]
    for name, arr in checkpoint.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    blob = json.dumps(checkpoint.blob, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    payload = b"".join(parts)
    body = PREAMBLE.pack(MAGIC, checkpoint.version, len(payload)) + payload
    return body + CHECKSUM.pack(content_checksum(body))


class _Reader:
    def __init__(self, data: bytes, offset: int, end: int):
        self.data = data
        self.offset = offset
        self.end = end

    def take(self, size: int) -> bytes:
        if self.offset + size > self.end:
            raise CheckpointTruncatedError(f"payload ends at byte {self.end}, needed {self.offset + size}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Raises:
        CheckpointError: Bad magic
        CheckpointVersionError: Unsupported version
        CheckpointTruncatedError: File shorter than declared
        CheckpointChecksumError: Content does not match the stored checksum
    """
    if len(data) < PREAMBLE.size:
        raise CheckpointTruncatedError(f"file has {len(data)} bytes, header needs {PREAMBLE.size}")
    magic, version, length = PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {FORMAT_VERSION}")
    end = PREAMBLE.size + length
    if len(data) < end + CHECKSUM.size:
        raise CheckpointTruncatedError(f"file has {len(data)} bytes, expected {end + CHECKSUM.size}")
    if len(data) > end + CHECKSUM.size:
        raise CheckpointError(f"{len(data) - end - CHECKSUM.size} trailing bytes after checksum")
    (stored,) = CHECKSUM.unpack_from(data, end)
    if stored != content_checksum(data[:end]):
        raise CheckpointChecksumError("checksum mismatch: file is corrupted or was modified")

    reader = _Reader(data, PREAMBLE.size, end)
    (count,) = reader.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        tensors[name] = values.reshape(shape)
    (blob_len,) = reader.unpack("<I")
    blob = json.loads(reader.take(blob_len).decode("utf-8"))
    if reader.offset != end:
        raise CheckpointError(f"{end - reader.offset} unread payload bytes")
    return Checkpoint(tensors=tensors, blob=blob, version=version)


def save_checkpoint(state: SearchState, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint_from_state(state, extra)))
    logger.info(f"Saved checkpoint (epoch {state.epoch}) to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes())
    logger.debug(f"Loaded checkpoint {path}: epoch {checkpoint.epoch}, {len(checkpoint.tensors)} tensors")
    return checkpoint
