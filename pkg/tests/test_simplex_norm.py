"""
Tests for simplex normalizers and the temperature schedule
"""

import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from lib.simplex_norm import (
    AnnealSchedule,
    Normalizer,
    ProbabilityRule,
    SimplexNormError,
    annealed_sparsemax,
    effective_temperature,
    softmax_tensor,
    softmax_temperature,
    sparsemax,
    sparsemax_tensor,
)
from lib.tensor_engine import Tensor, backward, mul, sum_all


def grid_projection(z: np.ndarray, steps: int = 200) -> np.ndarray:
    """Closest point of a fine simplex grid to z (brute force, 3 entries at most)."""
    best, best_dist = None, np.inf
    for combo in itertools.product(range(steps + 1), repeat=len(z) - 1):
        if sum(combo) > steps:
            continue
        p = np.array(list(combo) + [steps - sum(combo)], dtype=float) / steps
        dist = float(((p - z) ** 2).sum())
        if dist < best_dist:
            best, best_dist = p, dist
    return best


class TestSoftmax:
    def test_symmetric(self):
        assert np.allclose(softmax_temperature([0.0, 0.0], 0.3), [0.5, 0.5])

    def test_low_temperature_approaches_argmax(self):
        assert softmax_temperature([1.0, 0.0], 0.01)[0] > 1 - 1e-6

    def test_matches_logsumexp(self):
        z = np.random.default_rng(0).normal(size=7)
        tau = 0.7
        expected = np.exp(z / tau - np.log(np.exp(z / tau).sum()))
        assert np.allclose(softmax_temperature(z, tau), expected, rtol=0, atol=1e-12)

    def test_rejects_non_positive_temperature(self):
        with pytest.raises(SimplexNormError):
            softmax_temperature([1.0, 2.0], 0.0)


class TestSparsemax:
    @pytest.mark.parametrize(
        "z,expected",
        [
            ([0.5, 0.5], [0.5, 0.5]),
            ([2.0, 1.0], [1.0, 0.0]),
            ([1.2, 1.0], [0.6, 0.4]),
            ([0.0, 0.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]),
        ],
    )
    def test_known_projections(self, z, expected):
        assert np.allclose(sparsemax(z), expected, rtol=0, atol=1e-12)

    def test_single_support_is_exact_one_hot(self):
        p = sparsemax([3.0, 0.1, -1.0])
        assert p.tolist() == [1.0, 0.0, 0.0]

    def test_matches_grid_projection(self):
        z = np.array([0.4, 0.3, -0.2])
        assert np.allclose(sparsemax(z), grid_projection(z), atol=1e-2)

    def test_simplex_membership(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = sparsemax(rng.normal(scale=3.0, size=5))
            assert np.all(p >= 0)
            assert abs(p.sum() - 1.0) <= 1e-12

    def test_batched_rows(self):
        z = np.array([[1.2, 1.0], [2.0, 1.0]])
        assert np.allclose(sparsemax(z), [[0.6, 0.4], [1.0, 0.0]])

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(SimplexNormError):
            sparsemax([])
        with pytest.raises(SimplexNormError):
            sparsemax([1.0, np.nan])


def threshold_projection(z: np.ndarray, iterations: int = 200) -> np.ndarray:
    """Simplex projection by bisection on τ with Σ max(z - τ, 0) = 1."""
    lo, hi = float(z.min()) - 1.0, float(z.max())
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if np.maximum(z - mid, 0.0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(z - 0.5 * (lo + hi), 0.0)


def random_scores(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-5.0, 5.0, size=int(rng.integers(2, 11)))


class TestSparsemaxProperties:
    def test_matches_threshold_bisection(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            z = random_scores(rng)
            assert np.allclose(sparsemax(z), threshold_projection(z), rtol=0, atol=1e-8)

    def test_shift_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            z = random_scores(rng)
            shift = rng.uniform(-50.0, 50.0)
            assert np.allclose(sparsemax(z + shift), sparsemax(z), rtol=0, atol=1e-10)

    def test_support_shrinks_as_temperature_drops(self):
        rng = np.random.default_rng(13)
        temperatures = [8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.1, 0.03, 0.01]
        for _ in range(200):
            z = random_scores(rng)
            sizes = [int(np.count_nonzero(sparsemax(z / tau))) for tau in temperatures]
            assert all(b <= a for a, b in zip(sizes, sizes[1:]))

    def test_support_shrinks_along_schedule(self):
        rng = np.random.default_rng(14)
        schedule = AnnealSchedule(tau0=1.5, factor=0.75, interval=5)
        for _ in range(100):
            z = random_scores(rng)
            sizes = [int(np.count_nonzero(annealed_sparsemax(z, schedule, e))) for e in range(0, 60, 5)]
            assert all(b <= a for a, b in zip(sizes, sizes[1:]))

    def test_cold_limit_is_argmax(self):
        rng = np.random.default_rng(15)
        for _ in range(200):
            z = random_scores(rng)
            top_two = np.sort(z)[-2:]
            tau = 0.5 * (top_two[1] - top_two[0])
            if tau <= 0:
                continue
            expected = np.zeros_like(z)
            expected[np.argmax(z)] = 1.0
            assert np.array_equal(sparsemax(z / tau), expected)

    def test_softmax_is_never_sparse(self):
        rng = np.random.default_rng(16)
        for _ in range(200):
            z = random_scores(rng)
            for tau in (1.5, 0.5, 0.1):
                assert np.all(softmax_temperature(z, tau) > 0)


class TestAnnealing:
    @pytest.mark.parametrize("epoch,expected", [(0, 1.5), (4, 1.5), (5, 1.125), (49, 1.5 * 0.75**9)])
    def test_effective_temperature(self, epoch, expected):
        assert effective_temperature(AnnealSchedule(), epoch) == pytest.approx(expected, rel=1e-12)

    def test_epoch_49_value(self):
        assert effective_temperature(AnnealSchedule(), 49) == pytest.approx(0.112627, abs=1e-6)

    def test_annealed_sparsemax_at_unit_temperature(self):
        schedule = AnnealSchedule(tau0=1.0, factor=0.5, interval=10)
        assert np.allclose(annealed_sparsemax([1.2, 1.0], schedule, 0), [0.6, 0.4])

    def test_annealed_sparsemax_collapses_when_cold(self):
        schedule = AnnealSchedule(tau0=0.1, factor=1.0, interval=1)
        assert annealed_sparsemax([1.2, 1.0], schedule, 3).tolist() == [1.0, 0.0]

    def test_equal_scores_stay_uniform(self):
        for epoch in (0, 7, 40):
            assert np.allclose(annealed_sparsemax([0.3] * 5, AnnealSchedule(), epoch), 0.2)

    def test_invalid_schedule(self):
        with pytest.raises(SimplexNormError):
            AnnealSchedule(tau0=0.0)
        with pytest.raises(SimplexNormError):
            AnnealSchedule(factor=1.5)
        with pytest.raises(SimplexNormError):
            AnnealSchedule(interval=0)


class TestDifferentiableNormalizers:
    """Tensor versions agree with the array versions and with finite differences"""

    @staticmethod
    def _fd(fn, z, upstream, h=1e-6):
        grad = np.zeros_like(z)
        for i in range(z.size):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            grad[i] = ((fn(zp) - fn(zm)) * upstream).sum() / (2 * h)
        return grad

    def test_sparsemax_gradient(self):
        z = np.array([0.9, 0.7, 0.1, -0.5])
        upstream = np.array([1.0, -2.0, 0.5, 3.0])
        t = Tensor(z, requires_grad=True)
        backward(sum_all(mul(sparsemax_tensor(t), Tensor(upstream))))
        assert np.allclose(t.grad, self._fd(sparsemax, z, upstream), atol=1e-6)

    def test_softmax_gradient(self):
        z = np.array([0.3, -0.1, 0.8])
        upstream = np.array([2.0, 0.5, -1.0])
        t = Tensor(z, requires_grad=True)
        backward(sum_all(mul(softmax_tensor(t, 0.5), Tensor(upstream))))
        assert np.allclose(t.grad, self._fd(lambda v: softmax_temperature(v, 0.5), z, upstream), atol=1e-6)

    @pytest.mark.parametrize("normalizer", list(Normalizer))
    def test_rule_apply_matches_probabilities(self, normalizer):
        rule = ProbabilityRule(normalizer, AnnealSchedule())
        scores = np.random.default_rng(5).normal(size=(3, 5))
        assert np.allclose(rule.apply(Tensor(scores), 12).data, rule.probabilities(scores, 12), atol=1e-15)
