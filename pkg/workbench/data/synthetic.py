"""
Synthetic image datasets for desk-scale runs.

Three generators, all deterministic per seed and class-balanced:

- blobs: one Gaussian bump per class with a class-specific position and width
- stripes: sinusoidal gratings with a class-specific orientation and random phase
- xor-texture: two half-image checkerboards whose contrast levels sum to the label (mod classes)

At noise 0 every class is separable; noise adds i.i.d. Gaussian pixel noise
(in units of full intensity) before quantization to u8.
"""

import logging
from enum import Enum
from typing import Callable, Dict

import numpy as np

from workbench.data.container import DatasetContainer, Split


logger = logging.getLogger(__name__)


class SyntheticKind(Enum):
    BLOBS = "blobs"
    STRIPES = "stripes"
    XOR_TEXTURE = "xor-texture"


def _grid(size: int):
    coords = np.arange(size, dtype=np.float64)
    return np.meshgrid(coords, coords, indexing="ij")


def _blobs(labels: np.ndarray, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    centre, radius, sigma = (size - 1) / 2.0, size / 4.0, max(size / 8.0, 1.0)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    widths = sigma * (1.0 + np.arange(classes) / classes)
    bumps = np.stack(
        [
            np.exp(-((yy - centre - radius * np.sin(a)) ** 2 + (xx - centre - radius * np.cos(a)) ** 2) / (2 * s**2))
            for a, s in zip(angles, widths)
        ]
    )
    return bumps[labels]


def _stripes(labels: np.ndarray, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    angles = np.pi * labels / classes
    phases = rng.uniform(0.0, 2.0 * np.pi, size=labels.size)
    freq = 3.0 / size
    proj = xx[None] * np.cos(angles)[:, None, None] + yy[None] * np.sin(angles)[:, None, None]
    return 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * proj + phases[:, None, None])


def _xor_texture(labels: np.ndarray, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    checker = ((yy.astype(int) + xx.astype(int)) % 2) * 2.0 - 1.0
    left = rng.integers(0, classes, size=labels.size)
    right = (labels - left) % classes
    levels = np.linspace(0.1, 0.5, classes)
    half = size // 2
    images = np.empty((labels.size, size, size))
    images[:, :, :half] = 0.5 + levels[left][:, None, None] * checker[None, :, :half]
    images[:, :, half:] = 0.5 + levels[right][:, None, None] * checker[None, :, half:]
    return images


GENERATORS: Dict[SyntheticKind, Callable[[np.ndarray, int, int, np.random.Generator], np.ndarray]] = {
    SyntheticKind.BLOBS: _blobs,
    SyntheticKind.STRIPES: _stripes,
    SyntheticKind.XOR_TEXTURE: _xor_texture,
}


def generate_synthetic(
    kind: SyntheticKind,
    num_samples: int,
    classes: int = 2,
    noise: float = 0.0,
    seed: int = 0,
    size: int = 16,
    channels: int = 1,
    split: Split = Split.TRAIN,
) -> DatasetContainer:
    """
    Generate a class-balanced container of `num_samples` images.

    Args:
        kind: Pattern family
        num_samples: Number of images (labels balanced within ±1 per class)
        classes: Number of classes (>= 2)
        noise: Standard deviation of additive pixel noise, intensity units
        seed: Seed for labels, pattern parameters and noise
        size: Image height and width
        channels: Identical copies of the pattern per channel
        split: Split tag stored on the container

    Raises:
        ValueError: If classes < 2 or extents are not positive
    """
    kind = SyntheticKind(kind)
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    if num_samples < 1 or size < 1 or channels < 1:
        raise ValueError("num_samples, size and channels must be positive")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")
    rng = np.random.default_rng([seed, list(SyntheticKind).index(kind)])
    labels = rng.permutation(np.arange(num_samples) % classes)
    images = GENERATORS[kind](labels, classes, size, rng)
    if noise > 0:
        images = images + noise * rng.standard_normal(images.shape)
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    samples = np.repeat(pixels[:, None], channels, axis=1)
    logger.debug(f"Generated {num_samples} {kind.value} samples, {classes} classes, noise={noise}")
    return DatasetContainer(samples, labels.astype(np.uint8), classes, split)
