"""
Tests for the zeroth-order bilevel search
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from lib.arch_eval import (
    RetrainConfig,
    RetrainData,
    materialize,
    retrain_with_discard,
    sample_architecture,
    snapshot_probabilities,
)
from lib.simplex_norm import AnnealSchedule
from lib.supernet import SupernetConfig, build_supernet, expected_param_count
from lib.tensor_engine import MomentumSGD, Tensor, backward
from lib.zo_search import (
    BatchStream,
    BilevelProblemError,
    NonFiniteLossError,
    PenaltyTerms,
    PerturbationDirection,
    QuadraticBilevelProblem,
    QuadraticModel,
    SearchConfig,
    SearchData,
    SearchError,
    SupernetModel,
    active_arch_params,
    bilevel_round,
    draw_direction,
    implicit_gradient_exact,
    inner_train_steps,
    lambda_schedule,
    penalty_loss,
    penalty_value,
    perturb_surrogate,
    perturbation_scale,
    search,
    zo_forward_difference,
    zo_hypergradient,
)
from workbench.config.settings import PRESETS
from workbench.data.synthetic import SyntheticKind, generate_synthetic


TINY = dict(base_channels=2, num_stages=2, cells_per_stage=2, node_count=3, kernel_sizes=(3, 5), depths=(1, 2))


def plain_descent(lr: float) -> MomentumSGD:
    return MomentumSGD(lr, momentum=0.0, weight_decay=0.0)


@pytest.fixture
def scalar_problem():
    """L_train = ½(w − α)², L_val = ½w²: w*(α) = α, dF/dα = α."""
    return QuadraticBilevelProblem(A=[[1.0]], B=[[1.0]], P=[[1.0]])


@pytest.fixture
def random_problem():
    rng = np.random.default_rng(11)
    n, m = 4, 3
    M = rng.normal(size=(n, n))
    P = M @ M.T
    R = rng.normal(size=(m, m))
    return QuadraticBilevelProblem(
        A=np.diag([1.0, 1.5, 2.0, 2.5]),
        B=rng.normal(size=(n, m)),
        c=rng.normal(size=n),
        P=P,
        q=rng.normal(size=n),
        R=R + R.T,
        E=rng.normal(size=(m, n)),
    )


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(16, 1, 8, 8))
    y = np.arange(16) % 2
    return SearchData(x[:8], y[:8], x[8:], y[8:])


def tiny_config(**overrides) -> SearchConfig:
    values = dict(epochs=1, theta=1, inner_steps=1, batch_size=4, steps_per_epoch=1, seed=3)
    values.update(overrides)
    return SearchConfig(**values)


class TestActiveGroup:
    def test_before_threshold_only_alpha(self):
        net = build_supernet(SupernetConfig(**TINY))
        group = active_arch_params(net, 0, 20)
        assert sum(p.size for p in group) == 2 * 3 * 5

    def test_at_threshold_all_scores(self):
        net = build_supernet(SupernetConfig(**TINY))
        group = active_arch_params(net, 20, 20)
        assert [p.name for p in group] == ["arch.alpha", "arch.beta", "arch.gamma"]
        assert sum(p.size for p in group) == 30 + 2 * 3 * 2 + 2 * 2

    def test_zero_threshold_is_size_variable_from_start(self):
        net = build_supernet(SupernetConfig(**TINY))
        assert len(active_arch_params(net, 0, 0)) == 3

    def test_mu_scales_with_group_size(self):
        assert perturbation_scale(0.005, 90) == pytest.approx(0.45)


class TestDirections:
    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        for dim in (1, 5, 90):
            assert abs(np.linalg.norm(draw_direction(dim, rng).u) - 1.0) <= 1e-12

    def test_one_dimensional_is_sign(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert draw_direction(1, rng).u[0] in (1.0, -1.0)

    def test_mean_is_near_zero(self):
        rng = np.random.default_rng(2)
        draws = np.stack([draw_direction(3, rng).u for _ in range(100_000)])
        assert np.all(np.abs(draws.mean(axis=0)) <= 0.02)

    def test_split_matches_shapes(self):
        u = PerturbationDirection(np.arange(10.0))
        parts = u.split([(2, 3), (4,)])
        assert parts[0].shape == (2, 3)
        assert parts[1].tolist() == [6.0, 7.0, 8.0, 9.0]
        with pytest.raises(SearchError):
            u.split([(3,)])

    def test_zero_dimension_rejected(self):
        with pytest.raises(SearchError):
            draw_direction(0, np.random.default_rng(0))


class TestPenalty:
    def test_feasible_leaves_loss_untouched(self):
        val = Tensor(0.7)
        assert penalty_loss(val, Tensor(50.0), (10.0, 100.0), 2.0, 1.0) is val

    def test_upper_violation(self):
        out = penalty_loss(Tensor(1.0), Tensor(105.0), (0.0, 100.0), 2.0, 1.0)
        assert out.item() == pytest.approx(11.0)

    def test_lower_violation(self):
        out = penalty_loss(Tensor(1.0), Tensor(7.0), (10.0, 100.0), 2.0, 1.0)
        assert out.item() == pytest.approx(4.0)

    def test_boundary_has_no_penalty(self):
        assert penalty_value(100.0, (10.0, 100.0), 5.0, 5.0) == 0.0
        assert penalty_value(10.0, (10.0, 100.0), 5.0, 5.0) == 0.0

    def test_no_bounds(self):
        assert penalty_value(1e9, None, 5.0, 5.0) == 0.0

    def test_lambda_schedule(self):
        schedule = AnnealSchedule()
        assert lambda_schedule(schedule, 0, 15.0) == pytest.approx((10.0, 10.0))
        assert lambda_schedule(schedule, 5, 15.0)[0] == pytest.approx(13.3333333, rel=1e-6)

    def test_zero_scale_disables_penalty(self):
        for epoch in (0, 10, 49):
            lam = lambda_schedule(AnnealSchedule(), epoch, 0.0)
            assert not PenaltyTerms((0.0, 1.0), *lam).enabled

    @pytest.mark.parametrize("c,bounds", [(150.0, (0.0, 100.0)), (100.5, (0.0, 100.0)), (3.25, (10.0, 100.0))])
    def test_ramp_gradient_matches_finite_differences(self, c, bounds):
        lambda1, lambda2, h = 2.5, 1.75, 1e-3
        tc = Tensor(np.array(c), requires_grad=True)
        backward(penalty_loss(Tensor(0.0), tc, bounds, lambda1, lambda2))
        plus = penalty_value(c + h, bounds, lambda1, lambda2)
        minus = penalty_value(c - h, bounds, lambda1, lambda2)
        assert abs(float(tc.grad) - (plus - minus) / (2 * h)) <= 1e-4

    def test_supernet_penalty_gradient_matches_finite_differences(self):
        net = build_supernet(SupernetConfig(**TINY), seed=0)
        rng = np.random.default_rng(21)
        for t in net.arch_parameters():
            t.data = rng.normal(scale=0.05, size=t.shape)
        rule = tiny_config().rule
        c = net.expected_param_count(net.probabilities(rule, 0, True))
        bounds = (0.0, c.item() - 50.0)
        backward(penalty_loss(Tensor(0.0), c, bounds, 3.0, 0.0))

        def value():
            return penalty_value(expected_param_count(net, rule, 0, True), bounds, 3.0, 0.0)

        for t in net.arch_parameters():
            numeric = np.zeros_like(t.data)
            for idx in np.ndindex(t.shape):
                old = t.data[idx]
                t.data[idx] = old + 1e-5
                plus = value()
                t.data[idx] = old - 1e-5
                minus = value()
                t.data[idx] = old
                numeric[idx] = (plus - minus) / 2e-5
            assert np.abs(t.grad - numeric).max() <= 1e-4 * max(np.abs(numeric).max(), 1.0)


class TestQuadraticOracles:
    """The ZO estimate against closed-form implicit gradients"""

    def test_exact_gradient_scalar(self, scalar_problem):
        assert implicit_gradient_exact(scalar_problem, np.array([2.0]))[0] == 2.0

    def test_exact_gradient_zero_when_decoupled(self):
        problem = QuadraticBilevelProblem(A=[[2.0]], B=[[0.0]], c=[1.0], P=[[1.0]])
        assert implicit_gradient_exact(problem, np.array([3.0]))[0] == 0.0

    def test_exact_gradient_matches_finite_differences(self, random_problem):
        alpha = np.array([0.3, -0.7, 1.1])
        h = 1e-5
        numeric = np.array(
            [
                (random_problem.outer_objective(alpha + h * e) - random_problem.outer_objective(alpha - h * e))
                / (2 * h)
                for e in np.eye(3)
            ]
        )
        assert np.allclose(implicit_gradient_exact(random_problem, alpha), numeric, rtol=0, atol=1e-6)

    def test_non_quadratic_rejected(self):
        with pytest.raises(BilevelProblemError):
            implicit_gradient_exact("not a problem", np.zeros(1))  # type: ignore[arg-type]

    def test_indefinite_lower_level_rejected(self):
        with pytest.raises(BilevelProblemError):
            QuadraticBilevelProblem(A=[[-1.0]], B=[[1.0]])

    def test_zo_round_recovers_scalar_gradient(self, scalar_problem):
        model = QuadraticModel(scalar_problem, w0=[0.0], alpha0=[2.0])
        result = bilevel_round(model, plain_descent(0.5), PerturbationDirection(np.array([1.0])), 1e-3, 60, 0)
        assert result.estimate.grads[0][0] == pytest.approx(2.0, rel=0.05)

    def test_zo_round_projects_exact_gradient(self, random_problem):
        alpha = np.array([0.3, -0.7, 1.1])
        model = QuadraticModel(random_problem, w0=np.zeros(4), alpha0=alpha)
        direction = draw_direction(3, np.random.default_rng(4))
        result = bilevel_round(model, plain_descent(0.2), direction, 1e-2, 300, 0)
        exact = implicit_gradient_exact(random_problem, alpha)
        expected = float(exact @ direction.u) * direction.u
        assert np.allclose(result.estimate.grads[0], expected, rtol=1e-6, atol=1e-8)

    def test_constant_validation_loss_gives_zero(self):
        problem = QuadraticBilevelProblem(A=[[1.0]], B=[[1.0]])
        model = QuadraticModel(problem, w0=[0.0], alpha0=[1.0])
        result = bilevel_round(model, plain_descent(0.5), PerturbationDirection(np.array([-1.0])), 1e-3, 10, 0)
        assert result.estimate.grads[0].tolist() == [0.0]

    def test_forward_difference_error_shrinks_with_mu(self, scalar_problem):
        mus = [0.1 * 0.5**i for i in range(5)]
        errors = [
            abs(zo_forward_difference(scalar_problem.outer_objective, np.array([2.0]), np.array([1.0]), mu)[0] - 2.0)
            for mu in mus
        ]
        assert all(b / a <= 0.75 for a, b in zip(errors, errors[1:]))

    def test_non_positive_mu_rejected(self, scalar_problem):
        model = QuadraticModel(scalar_problem, w0=[0.0], alpha0=[2.0])
        with pytest.raises(SearchError):
            zo_hypergradient(model, model.clone(), PerturbationDirection(np.array([1.0])), 0.0, None, 0)


class TestInnerTraining:
    def test_zero_perturbation_keeps_models_identical(self, tiny_data):
        net = build_supernet(SupernetConfig(**TINY), seed=1)
        model = SupernetModel(net, tiny_config().rule, theta=1)
        surrogate = model.clone()
        direction = draw_direction(30, np.random.default_rng(0))
        perturb_surrogate(surrogate, direction, 0.0, 0)
        stream = BatchStream(tiny_data.train_x, tiny_data.train_y, 4, seed=0, stream_id=0)
        optimizer = MomentumSGD(0.05)
        inner_train_steps(model, surrogate, stream, 2, optimizer, optimizer.clone(), 0)
        for a, b in zip(model.weight_parameters(), surrogate.weight_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_single_step_consumes_one_batch(self, scalar_problem, tiny_data):
        stream = BatchStream(tiny_data.train_x, tiny_data.train_y, 4, seed=0, stream_id=0)
        model = QuadraticModel(scalar_problem, w0=[0.0], alpha0=[1.0])
        direction = PerturbationDirection(np.array([1.0]))
        bilevel_round(model, plain_descent(0.1), direction, 1e-3, 1, 0, train_stream=stream)
        assert stream.consumed == 1

    def test_gradient_norm_non_increasing_on_convex_model(self, random_problem):
        model = QuadraticModel(random_problem, w0=np.zeros(4), alpha0=np.ones(3))
        optimizer = plain_descent(0.1)
        norms = []
        for _ in range(30):
            _, grads = model.train_gradients(None, 0)
            norms.append(float(np.linalg.norm(grads[0])))
            optimizer.step(model.weight_parameters(), grads)
        assert all(b <= a for a, b in zip(norms, norms[1:]))


class TestSurrogateState:
    @pytest.fixture
    def model(self):
        return SupernetModel(build_supernet(SupernetConfig(**TINY), seed=1), tiny_config().rule, theta=1)

    def test_assign_from_copies_independently(self, model):
        twin = model.clone()
        for t in twin.net.named_tensors().values():
            t.data = t.data + 1.0
        twin.assign_from(model)
        live, copied = model.net.named_tensors(), twin.net.named_tensors()
        assert list(live) == list(copied)
        for name, t in live.items():
            assert np.array_equal(copied[name].data, t.data)
            assert copied[name].data is not t.data
            assert copied[name].grad is None
        model.net.arch.alpha.data[0, 0, 0] += 5.0
        assert copied["arch.alpha"].data[0, 0, 0] != model.net.arch.alpha.data[0, 0, 0]

    def test_assign_from_quadratic_model(self, random_problem):
        model = QuadraticModel(random_problem, w0=np.arange(4.0), alpha0=np.ones(3))
        other = QuadraticModel(random_problem, w0=np.zeros(4), alpha0=np.zeros(3))
        other.assign_from(model)
        model.w.data[0] = -9.0
        assert np.array_equal(other.w.data, np.arange(4.0))
        assert np.array_equal(other.alpha.data, np.ones(3))

    def test_assign_across_model_kinds_rejected(self, model, scalar_problem):
        with pytest.raises(SearchError):
            model.assign_from(QuadraticModel(scalar_problem, w0=[0.0], alpha0=[0.0]))

    def test_hypergradient_leaves_live_state_untouched(self, model, tiny_data):
        surrogate = model.clone()
        direction = draw_direction(30, np.random.default_rng(4))
        perturb_surrogate(surrogate, direction, 0.1, 0)
        before = {name: t.data.copy() for name, t in model.net.named_tensors().items()}
        batch = (tiny_data.val_x[:4], tiny_data.val_y[:4])
        zo_hypergradient(model, surrogate, direction, 0.1, batch, 0, PenaltyTerms((0.0, 1.0), 2.0, 0.0))
        for name, t in model.net.named_tensors().items():
            assert np.array_equal(t.data, before[name]), name
        shifted = surrogate.net.arch.alpha.data - before["arch.alpha"]
        assert np.allclose(shifted.reshape(-1), 0.1 * direction.u, atol=1e-12)

    def test_reused_surrogate_matches_fresh_clone(self, tiny_data):
        def run(reuse: bool):
            model = SupernetModel(build_supernet(SupernetConfig(**TINY), seed=1), tiny_config().rule, theta=1)
            surrogate = None
            if reuse:
                surrogate = model.clone()
                for t in surrogate.net.named_tensors().values():
                    t.data = t.data - 0.5
            alpha_before = model.net.arch.alpha.data.copy()
            stream = BatchStream(tiny_data.train_x, tiny_data.train_y, 4, seed=0, stream_id=0)
            direction = draw_direction(30, np.random.default_rng(5))
            outcome = bilevel_round(
                model,
                MomentumSGD(0.05),
                direction,
                1e-2,
                2,
                0,
                train_stream=stream,
                val_batch=(tiny_data.val_x[:4], tiny_data.val_y[:4]),
                surrogate=surrogate,
            )
            assert np.array_equal(model.net.arch.alpha.data, alpha_before)
            return outcome, model

        fresh, fresh_model = run(False)
        reused, reused_model = run(True)
        assert reused.estimate.directional == fresh.estimate.directional
        assert reused.train_losses == fresh.train_losses
        for a, b in zip(fresh_model.weight_parameters(), reused_model.weight_parameters()):
            assert np.array_equal(a.data, b.data)


class TestBatchStream:
    def test_deterministic_per_epoch(self, tiny_data):
        a = BatchStream(tiny_data.train_x, tiny_data.train_y, 3, seed=5, stream_id=0)
        b = BatchStream(tiny_data.train_x, tiny_data.train_y, 3, seed=5, stream_id=0)
        a.start_epoch(4)
        b.start_epoch(4)
        for _ in range(5):
            assert np.array_equal(a.next_batch()[0], b.next_batch()[0])

    def test_wraps_around(self, tiny_data):
        stream = BatchStream(tiny_data.train_x, tiny_data.train_y, 3, seed=0, stream_id=0)
        batches = [stream.next_batch() for _ in range(4)]
        assert all(len(x) == 3 for x, _ in batches)
        assert stream.consumed == 4

    def test_empty_rejected(self):
        with pytest.raises(SearchError):
            BatchStream(np.zeros((0, 1, 2, 2)), np.zeros(0), 2, 0, 0)


class TestSearchConfig:
    def test_defaults(self):
        config = SearchConfig()
        assert (config.epochs, config.theta, config.inner_steps) == (50, 20, 10)
        assert config.bounds is None

    def test_one_sided_bounds(self):
        assert SearchConfig(c_upper=500.0).bounds == (0.0, 500.0)
        assert SearchConfig(c_lower=10.0).bounds == (10.0, math.inf)

    def test_theta_beyond_epochs_rejected(self):
        with pytest.raises(ValidationError):
            SearchConfig(epochs=5, theta=6)

    def test_inverted_bounds_rejected(self):
        with pytest.raises(ValidationError):
            SearchConfig(c_lower=10.0, c_upper=5.0)


class TestSearch:
    def test_smoke_single_epoch(self, tiny_data):
        net = build_supernet(SupernetConfig(**TINY), seed=0)
        result = search(net, tiny_data, tiny_config())
        assert len(result.trace) == 1
        record = result.trace.final
        assert np.allclose(record.alpha_probs.sum(axis=-1), 1.0, atol=1e-12)
        assert record.penalty == 0.0
        assert record.tau_eff == pytest.approx(1.5)
        assert result.state.epoch == 1
        assert not result.stopped_early

    def test_size_variable_epochs_carry_kernel_and_depth(self, tiny_data):
        net = build_supernet(SupernetConfig(**TINY), seed=0)
        result = search(net, tiny_data, tiny_config(epochs=2, theta=1, c_upper=1.0))
        first, second = result.trace.records
        assert first.beta_probs is None and first.penalty == 0.0
        assert second.size_variable
        assert np.allclose(second.gamma_probs.sum(axis=-1), 1.0)
        assert second.penalty > 0.0

    def test_never_active_bounds_match_unconstrained(self, tiny_data):
        free = search(build_supernet(SupernetConfig(**TINY), seed=0), tiny_data, tiny_config(epochs=2, theta=0))
        loose = search(
            build_supernet(SupernetConfig(**TINY), seed=0),
            tiny_data,
            tiny_config(epochs=2, theta=0, c_upper=1e12),
        )
        assert [r.to_dict() for r in loose.trace.records] == [r.to_dict() for r in free.trace.records]
        assert all(r.penalty == 0.0 for r in loose.trace.records)

    def test_early_stop(self, tiny_data):
        net = build_supernet(SupernetConfig(**TINY), seed=0)
        result = search(net, tiny_data, tiny_config(epochs=3, theta=1, early_stop=1))
        assert len(result.trace) == 1
        assert result.stopped_early

    def test_resume_matches_uninterrupted(self, tiny_data):
        config = tiny_config(epochs=3, theta=1, c_upper=1.0)
        full = search(build_supernet(SupernetConfig(**TINY), seed=0), tiny_data, config)
        partial = search(
            build_supernet(SupernetConfig(**TINY), seed=0),
            tiny_data,
            tiny_config(epochs=3, theta=1, c_upper=1.0, early_stop=1),
        )
        resumed = search(None, tiny_data, config, resume=partial.state)  # type: ignore[arg-type]
        assert [r.to_dict() for r in resumed.trace.records] == [r.to_dict() for r in full.trace.records]

    def test_on_epoch_called(self, tiny_data):
        seen = []
        search(
            build_supernet(SupernetConfig(**TINY), seed=0),
            tiny_data,
            tiny_config(epochs=2, theta=2),
            on_epoch=lambda state, record: seen.append((state.epoch, record.epoch)),
        )
        assert seen == [(1, 0), (2, 1)]

    def test_non_finite_loss_aborts_with_last_good_state(self, tiny_data):
        bad = SearchData(np.full_like(tiny_data.train_x, np.nan), tiny_data.train_y, tiny_data.val_x, tiny_data.val_y)
        net = build_supernet(SupernetConfig(**TINY), seed=0)
        with pytest.raises(NonFiniteLossError) as excinfo:
            search(net, bad, tiny_config())
        last_good = excinfo.value.last_good
        assert last_good is not None
        assert last_good.epoch == 0
        assert all(np.all(np.isfinite(p.data)) for p in last_good.net.weight_parameters())


@pytest.mark.slow
class TestDeskScaleSearch:
    """Two-stage supernet on 4000 blob images, ci preset, unconstrained"""

    def test_search_converges_and_retrains_within_budget(self):
        train, val = generate_synthetic(SyntheticKind.BLOBS, 4000, noise=0.05, seed=0).split_off(0.5)
        test = generate_synthetic(SyntheticKind.BLOBS, 1000, noise=0.05, seed=1)
        (tx, ty), (vx, vy), (sx, sy) = train.as_float(), val.as_float(), test.as_float()
        net_config = SupernetConfig(
            base_channels=8, num_stages=2, cells_per_stage=2, node_count=4, kernel_sizes=(3, 5), depths=(1, 2)
        )
        config = SearchConfig(**{**PRESETS["ci"]["search"], "batch_size": 32, "steps_per_epoch": 8, "seed": 1})

        start = time.perf_counter()
        result = search(build_supernet(net_config, seed=0), SearchData(tx, ty, vx, vy), config)
        assert time.perf_counter() - start < 600.0

        edge_max = result.trace.final.alpha_probs.max(axis=-1).reshape(-1)
        assert np.mean(edge_max >= 0.99) >= 0.9

        final = snapshot_probabilities(result.net, config.rule, config.epochs - 1, True)
        data = RetrainData(tx, ty, vx, vy, sx, sy)
        rng = np.random.default_rng(3)
        for i in range(2):
            arch = sample_architecture(net_config, final, rng)
            outcome = retrain_with_discard(
                materialize(arch, seed=i), data, RetrainConfig(epochs=3, batch_size=32, eval_batch_size=250)
            )
            assert not outcome.discarded
            assert outcome.test_acc >= 0.95
