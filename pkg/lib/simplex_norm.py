"""
Simplex normalization functions g(·) for architecture scores.

Provides softmax with temperature, sparsemax (Euclidean projection onto the
probability simplex), the annealed sparsemax whose temperature decays every
`interval` epochs, and differentiable Tensor versions of both normalizers
for use inside the supernet graph.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from lib.tensor_engine import Tensor, record_op, scale


logger = logging.getLogger(__name__)


class SimplexNormError(Exception):
    """Raised for invalid normalizer arguments"""

    pass


class Normalizer(Enum):
    """Probability normalization used for α, β and γ."""

    SOFTMAX = "softmax"
    SPARSEMAX = "sparsemax"


@dataclass(frozen=True)
class AnnealSchedule:
    """
    Temperature schedule τ·a^(epoch // m).

    Attributes:
        tau0: Initial temperature τ (> 0)
        factor: Annealing factor a in (0, 1]
        interval: Epochs between decays m (≥ 1)
    """

    tau0: float = 1.5
    factor: float = 0.75
    interval: int = 5

    def __post_init__(self) -> None:
        if not self.tau0 > 0:
            raise SimplexNormError(f"tau0 must be positive, got {self.tau0}")
        if not 0 < self.factor <= 1:
            raise SimplexNormError(f"factor must lie in (0, 1], got {self.factor}")
        if self.interval < 1:
            raise SimplexNormError(f"interval must be >= 1, got {self.interval}")


def effective_temperature(schedule: AnnealSchedule, epoch: int) -> float:
    """tau0 · factor^(epoch // interval)."""
    return schedule.tau0 * schedule.factor ** (max(int(epoch), 0) // schedule.interval)


def softmax_temperature(z, tau: float) -> np.ndarray:
    """exp(z_i/τ) / Σ exp(z_j/τ), max-subtracted."""
    if not tau > 0:
        raise SimplexNormError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    shifted = (z - z.max(axis=-1, keepdims=True)) / tau
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sparsemax_vector(z: np.ndarray) -> np.ndarray:
    order = np.argsort(-z, kind="stable")
    zs = z[order]
    cssv = np.cumsum(zs)
    ks = np.arange(1, z.size + 1)
    k = int(ks[1.0 + ks * zs > cssv][-1])
    if k == 1:
        p = np.zeros_like(z)
        p[order[0]] = 1.0
        return p
    threshold = (cssv[k - 1] - 1.0) / k
    return np.maximum(z - threshold, 0.0)


def sparsemax(z) -> np.ndarray:
    """
    Euclidean projection of z onto the probability simplex (last axis).

    Sort-and-threshold closed form: with z sorted descending, k is the
    largest index with 1 + k·z_(k) > Σ_{j≤k} z_(j) and the threshold is
    (Σ_{j≤k} z_(j) − 1)/k. A single-element support is returned as an exact
    one-hot vector.

    Raises:
        SimplexNormError: If z is empty or not finite
    """
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise SimplexNormError("sparsemax needs a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise SimplexNormError("sparsemax needs finite scores")
    if z.ndim == 1:
        return _sparsemax_vector(z)
    flat = z.reshape(-1, z.shape[-1])
    return np.stack([_sparsemax_vector(row) for row in flat]).reshape(z.shape)


def annealed_sparsemax(z, schedule: AnnealSchedule, epoch: int) -> np.ndarray:
    """sparsemax(z / effective_temperature(schedule, epoch))."""
    return sparsemax(np.asarray(z, dtype=np.float64) * (1.0 / effective_temperature(schedule, epoch)))


def sparsemax_tensor(x: Tensor) -> Tensor:
    """
    Differentiable sparsemax along the last axis.

    Backward uses the support-restricted Jacobian I_S − (1/|S|)·1_S 1_Sᵀ.
    """
    probs = sparsemax(x.data)
    support = probs > 0

    def _bw(g: np.ndarray):
        count = support.sum(axis=-1, keepdims=True)
        mean = (g * support).sum(axis=-1, keepdims=True) / count
        return (support * (g - mean),)

    return record_op("sparsemax", probs, (x,), _bw)


def softmax_tensor(x: Tensor, tau: float) -> Tensor:
    """Differentiable temperature softmax along the last axis."""
    probs = softmax_temperature(x.data, tau)

    def _bw(g: np.ndarray):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner) / tau,)

    return record_op("softmax", probs, (x,), _bw)


@dataclass(frozen=True)
class ProbabilityRule:
    """
    Normalizer plus schedule: the complete g(·) for a given epoch.

    The temperature is a constant divisor within an epoch; no gradient flows
    into the schedule.
    """

    normalizer: Normalizer = Normalizer.SPARSEMAX
    schedule: AnnealSchedule = AnnealSchedule()

    def temperature(self, epoch: int) -> float:
        return effective_temperature(self.schedule, epoch)

    def probabilities(self, scores, epoch: int) -> np.ndarray:
        tau = self.temperature(epoch)
        if self.normalizer is Normalizer.SOFTMAX:
            return softmax_temperature(scores, tau)
        return sparsemax(np.asarray(scores, dtype=np.float64) * (1.0 / tau))

    def apply(self, scores: Tensor, epoch: int) -> Tensor:
        tau = self.temperature(epoch)
        if self.normalizer is Normalizer.SOFTMAX:
            return softmax_tensor(scores, tau)
        return sparsemax_tensor(scale(scores, 1.0 / tau))
