"""
Dataset container - binary image/label files.

Layout (little-endian, no padding):

    offset  size  field
    0       4     magic b"ZDX1"
    4       4     u32 num_samples
    8       4     u32 channels
    12      4     u32 height
    16      4     u32 width
    20      4     u32 num_classes
    24      N·C·H·W  u8 pixels, row-major, sample-major
    ...     N     u8 labels
"""

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Tuple, Union

import numpy as np


logger = logging.getLogger(__name__)

MAGIC = b"ZDX1"
HEADER = struct.Struct("<4s5I")


class DatasetFormatError(Exception):
    """Raised when a container file is malformed; carries the byte offset"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class DatasetContainer:
    """
    u8 images with u8 labels.

    Attributes:
        samples: Pixels [num_samples, channels, height, width]
        labels: Class indices [num_samples]
        num_classes: Number of classes (every label is below it)
        split: Which split the container holds
    """

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: Split = Split.TRAIN

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(self.samples, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
        if self.samples.ndim != 4 or min(self.samples.shape) < 1:
            raise ValueError(f"samples must be [N, C, H, W] with positive extents, got {self.samples.shape}")
        if self.labels.shape[0] != self.samples.shape[0]:
            raise ValueError(f"{self.labels.shape[0]} labels for {self.samples.shape[0]} samples")
        if not 1 <= self.num_classes <= 256:
            raise ValueError(f"num_classes must lie in [1, 256], got {self.num_classes}")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError(f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        _, c, h, w = self.samples.shape
        return int(c), int(h), int(w)

    def as_float(self) -> Tuple[np.ndarray, np.ndarray]:
        """Pixels scaled to [0, 1] as float64 plus int64 labels."""
        return self.samples.astype(np.float64) / 255.0, self.labels.astype(np.int64)

    def subset(self, indices: np.ndarray, split: Split) -> "DatasetContainer":
        return DatasetContainer(self.samples[indices], self.labels[indices], self.num_classes, split)

    def split_off(self, fraction: float) -> Tuple["DatasetContainer", "DatasetContainer"]:
        """First `fraction` of the samples as train, the rest as val (file order)."""
        cut = int(round(len(self) * fraction))
        if not 0 < cut < len(self):
            raise ValueError(f"split {fraction} leaves an empty side of {len(self)} samples")
        idx = np.arange(len(self))
        return self.subset(idx[:cut], Split.TRAIN), self.subset(idx[cut:], Split.VAL)


def encode_dataset(container: DatasetContainer) -> bytes:
    n, c, h, w = container.samples.shape
    header = HEADER.pack(MAGIC, n, c, h, w, container.num_classes)
    return header + container.samples.tobytes(order="C") + container.labels.tobytes()


def decode_dataset(payload: bytes, split: Split = Split.TRAIN) -> DatasetContainer:
    """
    Raises:
        DatasetFormatError: Bad magic, truncated or oversized payload, zero
            extents or out-of-range labels
    """
    if len(payload) < HEADER.size:
        raise DatasetFormatError(f"header needs {HEADER.size} bytes, file has {len(payload)}", len(payload))
    magic, n, c, h, w, num_classes = HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    for offset, name, value in ((4, "num_samples", n), (8, "channels", c), (12, "height", h), (16, "width", w)):
        if value == 0:
            raise DatasetFormatError(f"{name} must be positive", offset)
    if not 1 <= num_classes <= 256:
        raise DatasetFormatError(f"num_classes {num_classes} outside [1, 256]", 20)
    pixel_bytes = n * c * h * w
    expected = HEADER.size + pixel_bytes + n
    if len(payload) < expected:
        raise DatasetFormatError(f"truncated payload: expected {expected} bytes, got {len(payload)}", len(payload))
    if len(payload) > expected:
        raise DatasetFormatError(f"{len(payload) - expected} trailing bytes", expected)
    samples = np.frombuffer(payload, dtype=np.uint8, count=pixel_bytes, offset=HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(payload, dtype=np.uint8, count=n, offset=HEADER.size + pixel_bytes)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise DatasetFormatError(
            f"label {int(labels[i])} of sample {i} >= num_classes {num_classes}", HEADER.size + pixel_bytes + i
        )
    return DatasetContainer(samples.copy(), labels.copy(), int(num_classes), split)


def load_dataset(path: Union[str, Path], split: Split = Split.TRAIN) -> DatasetContainer:
    path = Path(path)
    container = decode_dataset(path.read_bytes(), split)
    logger.debug(f"Loaded {len(container)} samples {container.image_shape} from {path}")
    return container


def save_dataset(container: DatasetContainer, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(container))
    logger.info(f"Wrote {len(container)} samples to {path}")
    return path
