"""
ZO Search - zeroth-order bilevel architecture search driver.

One α-update ("round") works like this:

1. draw a unit direction u over the active architecture group α′
2. clone the model into a surrogate and shift its α′ by μ·u
3. train both models T steps on the same training batches (w → w*, w̃)
4. evaluate the penalized validation loss L_val′ at (w*, α′) and combine
   ∇_α′ L_val′·u with ((w̃ − w*)/μ)·∇_w L_val′ into an estimate along u
5. step α′ with the adaptive-moment optimizer

The same round runs on any BilevelModel: the supernet wrapper used by
`search`, and analytic quadratic problems whose exact implicit gradient
serves as a reference.
"""

import copy
import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from lib.simplex_norm import AnnealSchedule, Normalizer, ProbabilityRule, effective_temperature
from lib.supernet import ArchProbabilities, Supernet
from lib.tensor_engine import (
    Adam,
    MomentumSGD,
    Optimizer,
    Tensor,
    add,
    backward,
    cosine_lr,
    cross_entropy_loss,
    no_grad,
    scale,
)


logger = logging.getLogger(__name__)

Batch = Optional[Tuple[np.ndarray, np.ndarray]]
Bounds = Optional[Tuple[float, float]]


class SearchError(Exception):
    """Base exception for search errors"""

    pass


class NonFiniteLossError(SearchError):
    """Raised when a loss or hypergradient becomes NaN/Inf; carries the last good state"""

    def __init__(self, message: str, last_good: Optional["SearchState"] = None):
        super().__init__(message)
        self.last_good = last_good


class BilevelProblemError(SearchError):
    """Raised when an analytic bilevel problem is malformed or unsupported"""

    pass


class SearchConfig(BaseModel):
    """
    Hyperparameters of the bilevel search.

    Attributes:
        epochs: Total epochs n
        theta: Epoch θ from which kernel/depth search and the size penalty are active
        inner_steps: Training steps T per α-update
        mu_scale: μ = mu_scale · |α′|
        tau0, anneal_factor, anneal_interval: Temperature schedule τ·a^(epoch//m)
        lambda_scale: λ₁ = λ₂ = lambda_scale / τ_eff
        c_lower, c_upper: Parameter-count bounds (either side optional)
        normalizer: softmax or sparsemax, applied to α, β and γ
        lr_w, lr_w_min: Cosine-decayed weight learning rate
        momentum, weight_decay: Weight optimizer
        lr_alpha, alpha_betas: Architecture optimizer
        batch_size: Samples per batch for both streams
        steps_per_epoch: α-updates per epoch (default: one per validation batch)
        early_stop: Stop after this many epochs (schedules still use `epochs`)
        seed: Seeds data order and perturbation directions
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(default=50, ge=1)
    theta: int = Field(default=20, ge=0)
    inner_steps: int = Field(default=10, ge=1)
    mu_scale: float = Field(default=0.005, gt=0)
    tau0: float = Field(default=1.5, gt=0)
    anneal_factor: float = Field(default=0.75, gt=0, le=1)
    anneal_interval: int = Field(default=5, ge=1)
    lambda_scale: float = Field(default=15.0, ge=0)
    c_lower: Optional[float] = Field(default=None, ge=0)
    c_upper: Optional[float] = Field(default=None, ge=0)
    normalizer: Normalizer = Normalizer.SPARSEMAX
    lr_w: float = Field(default=0.025, gt=0)
    lr_w_min: float = Field(default=0.001, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=3e-4, ge=0)
    lr_alpha: float = Field(default=3e-4, gt=0)
    alpha_betas: Tuple[float, float] = (0.5, 0.999)
    batch_size: int = Field(default=64, ge=1)
    steps_per_epoch: Optional[int] = Field(default=None, ge=1)
    early_stop: Optional[int] = Field(default=None, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "SearchConfig":
        if self.theta > self.epochs:
            raise ValueError(f"theta={self.theta} exceeds epochs={self.epochs}")
        if self.c_lower is not None and self.c_upper is not None and self.c_lower > self.c_upper:
            raise ValueError(f"c_lower={self.c_lower} exceeds c_upper={self.c_upper}")
        if self.early_stop is not None and self.early_stop > self.epochs:
            raise ValueError(f"early_stop={self.early_stop} exceeds epochs={self.epochs}")
        return self

    @property
    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.tau0, self.anneal_factor, self.anneal_interval)

    @property
    def rule(self) -> ProbabilityRule:
        return ProbabilityRule(self.normalizer, self.schedule)

    @property
    def bounds(self) -> Bounds:
        if self.c_lower is None and self.c_upper is None:
            return None
        lower = self.c_lower if self.c_lower is not None else 0.0
        upper = self.c_upper if self.c_upper is not None else math.inf
        return (lower, upper)

    @property
    def last_epoch(self) -> int:
        """Exclusive end of the epoch loop."""
        return self.early_stop if self.early_stop is not None else self.epochs


# ---------------------------------------------------------------------------
# Schedules, directions and the penalty
# ---------------------------------------------------------------------------


def lambda_schedule(schedule: AnnealSchedule, epoch: int, lambda_scale: float) -> Tuple[float, float]:
    """λ₁ = λ₂ = lambda_scale / τ_eff(epoch)."""
    lam = lambda_scale / effective_temperature(schedule, epoch)
    return lam, lam


def perturbation_scale(mu_scale: float, group_size: int) -> float:
    """μ = mu_scale · |α′| with |α′| the scalar count of the active group."""
    return mu_scale * group_size


@dataclass(frozen=True)
class PerturbationDirection:
    """Unit vector u over the flattened active architecture group."""

    u: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.u.size)

    def split(self, shapes: Sequence[Tuple[int, ...]]) -> List[np.ndarray]:
        """Cut u into pieces shaped like the tensors of the group."""
        pieces, offset = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            pieces.append(self.u[offset : offset + size].reshape(shape))
            offset += size
        if offset != self.u.size:
            raise SearchError(f"direction has {self.u.size} entries, group needs {offset}")
        return pieces


def draw_direction(dim: int, rng: np.random.Generator) -> PerturbationDirection:
    """Uniform draw on the unit sphere: a standard normal vector, normalized."""
    if dim < 1:
        raise SearchError(f"direction dimension must be >= 1, got {dim}")
    while True:
        v = rng.standard_normal(dim)
        norm = float(np.linalg.norm(v))
        if norm > 0.0:
            return PerturbationDirection(v / norm)


def penalty_value(c: float, bounds: Bounds, lambda1: float, lambda2: float) -> float:
    """λ₁·max(C − C_U, 0) + λ₂·max(C_L − C, 0)."""
    if bounds is None:
        return 0.0
    c_lower, c_upper = bounds
    return lambda1 * max(c - c_upper, 0.0) + lambda2 * max(c_lower - c, 0.0)


def penalty_loss(val_loss: Tensor, c: Tensor, bounds: Bounds, lambda1: float, lambda2: float) -> Tensor:
    """
    L_val′ = L_val + λ₁·max(C − C_U, 0) + λ₂·max(C_L − C, 0).

    A ramp term joins the graph only while strictly violated, so C on the
    boundary contributes neither value nor gradient and a feasible C leaves
    L_val untouched.
    """
    if bounds is None:
        return val_loss
    c_lower, c_upper = bounds
    value = c.item()
    if value > c_upper and lambda1 > 0:
        return add(val_loss, scale(add(c, Tensor(-c_upper)), lambda1))
    if value < c_lower and lambda2 > 0:
        return add(val_loss, scale(add(Tensor(c_lower), scale(c, -1.0)), lambda2))
    return val_loss


@dataclass(frozen=True)
class PenaltyTerms:
    """Bounds and multipliers in force for one epoch (disabled: bounds None)."""

    bounds: Bounds = None
    lambda1: float = 0.0
    lambda2: float = 0.0

    @property
    def enabled(self) -> bool:
        return self.bounds is not None and (self.lambda1 > 0 or self.lambda2 > 0)


# ---------------------------------------------------------------------------
# Bilevel models
# ---------------------------------------------------------------------------


@dataclass
class ValidationResult:
    """Penalized validation loss at (w*, α′) and its gradients."""

    loss: float
    penalty: float
    expected_params: Optional[float]
    weight_grads: List[np.ndarray]
    arch_grads: List[np.ndarray]


def _grads_or_zeros(params: Sequence[Tensor]) -> List[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


class BilevelModel(ABC):
    """
    Lower-level weights w plus upper-level architecture scores.

    Subclasses supply loss gradients and whole-state copy operations.
    """

    @abstractmethod
    def weight_parameters(self) -> List[Tensor]:
        raise NotImplementedError("Subclasses must implement weight_parameters()")

    @abstractmethod
    def arch_group(self, epoch: int) -> List[Tensor]:
        """The active group α′ at `epoch`."""
        raise NotImplementedError("Subclasses must implement arch_group()")

    @abstractmethod
    def train_gradients(self, batch: Batch, epoch: int) -> Tuple[float, List[np.ndarray]]:
        """L_train and ∇_w L_train."""
        raise NotImplementedError("Subclasses must implement train_gradients()")

    @abstractmethod
    def validation_gradients(self, batch: Batch, epoch: int, penalty: PenaltyTerms) -> ValidationResult:
        raise NotImplementedError("Subclasses must implement validation_gradients()")

    @abstractmethod
    def clone(self) -> "BilevelModel":
        raise NotImplementedError("Subclasses must implement clone()")

    @abstractmethod
    def assign_from(self, other: "BilevelModel") -> None:
        """Overwrite every weight and architecture score with a copy of `other`'s."""
        raise NotImplementedError("Subclasses must implement assign_from()")


def _assign_tensors(dst: Sequence[Tensor], src: Sequence[Tensor]) -> None:
    if len(dst) != len(src):
        raise SearchError(f"cannot assign {len(src)} tensors onto {len(dst)}")
    for d, s in zip(dst, src):
        d.data = s.data.copy()
        d.grad = None


class SupernetModel(BilevelModel):
    """Supernet with cross-entropy losses and the expected-size penalty."""

    def __init__(self, net: Supernet, rule: ProbabilityRule, theta: int):
        self.net = net
        self.rule = rule
        self.theta = theta

    def size_variable(self, epoch: int) -> bool:
        return epoch >= self.theta

    def probabilities(self, epoch: int) -> ArchProbabilities:
        return self.net.probabilities(self.rule, epoch, self.size_variable(epoch))

    def weight_parameters(self) -> List[Tensor]:
        return self.net.weight_parameters()

    def arch_group(self, epoch: int) -> List[Tensor]:
        return active_arch_params(self.net, epoch, self.theta)

    def train_gradients(self, batch: Batch, epoch: int) -> Tuple[float, List[np.ndarray]]:
        if batch is None:
            raise SearchError("supernet training needs a batch")
        x, y = batch
        self.net.zero_grad()
        loss = cross_entropy_loss(self.net.forward(x, self.probabilities(epoch)), y)
        backward(loss)
        return loss.item(), _grads_or_zeros(self.weight_parameters())

    def validation_gradients(self, batch: Batch, epoch: int, penalty: PenaltyTerms) -> ValidationResult:
        if batch is None:
            raise SearchError("supernet validation needs a batch")
        x, y = batch
        self.net.zero_grad()
        probs = self.probabilities(epoch)
        val_loss = cross_entropy_loss(self.net.forward(x, probs), y)
        total, c_value, pen = val_loss, None, 0.0
        if penalty.enabled:
            c = self.net.expected_param_count(probs)
            c_value = c.item()
            pen = penalty_value(c_value, penalty.bounds, penalty.lambda1, penalty.lambda2)
            total = penalty_loss(val_loss, c, penalty.bounds, penalty.lambda1, penalty.lambda2)
        backward(total)
        return ValidationResult(
            loss=val_loss.item(),
            penalty=pen,
            expected_params=c_value,
            weight_grads=_grads_or_zeros(self.weight_parameters()),
            arch_grads=_grads_or_zeros(self.arch_group(epoch)),
        )

    def clone(self) -> "SupernetModel":
        return SupernetModel(self.net.copy(), self.rule, self.theta)

    def assign_from(self, other: BilevelModel) -> None:
        if not isinstance(other, SupernetModel):
            raise SearchError(f"cannot assign {type(other).__name__} onto a supernet model")
        _assign_tensors(list(self.net.named_tensors().values()), list(other.net.named_tensors().values()))


def active_arch_params(net: Supernet, epoch: int, theta: int) -> List[Tensor]:
    """α before θ; {α, β, γ} from θ on."""
    if epoch < theta:
        return [net.arch.alpha]
    return [net.arch.alpha, net.arch.beta, net.arch.gamma]


class QuadraticBilevelProblem:
    """
    Analytic bilevel problem with a strictly convex quadratic lower level.

        L_train(w, α) = ½ wᵀA w − wᵀ(B α) − cᵀw           (w*(α) = A⁻¹(Bα + c))
        L_val(w, α)   = ½ wᵀP w + qᵀw + ½ αᵀR α + αᵀE w
        F(α)          = L_val(w*(α), α)
    """

    def __init__(
        self,
        A: np.ndarray,
        B: np.ndarray,
        c: Optional[np.ndarray] = None,
        P: Optional[np.ndarray] = None,
        q: Optional[np.ndarray] = None,
        R: Optional[np.ndarray] = None,
        E: Optional[np.ndarray] = None,
    ):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        n, m = self.B.shape
        if self.A.shape != (n, n):
            raise BilevelProblemError(f"A has shape {self.A.shape}, expected {(n, n)}")
        if not np.allclose(self.A, self.A.T):
            raise BilevelProblemError("A must be symmetric")
        if np.linalg.eigvalsh(self.A).min() <= 0:
            raise BilevelProblemError("A must be positive definite (strictly convex lower level)")
        self.c = np.zeros(n) if c is None else np.asarray(c, dtype=np.float64).reshape(n)
        self.P = np.zeros((n, n)) if P is None else np.atleast_2d(np.asarray(P, dtype=np.float64))
        self.q = np.zeros(n) if q is None else np.asarray(q, dtype=np.float64).reshape(n)
        self.R = np.zeros((m, m)) if R is None else np.atleast_2d(np.asarray(R, dtype=np.float64))
        self.E = np.zeros((m, n)) if E is None else np.atleast_2d(np.asarray(E, dtype=np.float64))
        if self.P.shape != (n, n) or self.R.shape != (m, m) or self.E.shape != (m, n):
            raise BilevelProblemError("P, R, E shapes do not match (n, m)")

    @property
    def weight_dim(self) -> int:
        return self.A.shape[0]

    @property
    def arch_dim(self) -> int:
        return self.B.shape[1]

    def w_star(self, alpha: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.A, self.B @ np.asarray(alpha, dtype=np.float64) + self.c)

    def train_loss(self, w: np.ndarray, alpha: np.ndarray) -> float:
        return float(0.5 * w @ self.A @ w - w @ (self.B @ alpha) - self.c @ w)

    def train_grad_w(self, w: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        return self.A @ w - self.B @ alpha - self.c

    def val_loss(self, w: np.ndarray, alpha: np.ndarray) -> float:
        return float(0.5 * w @ self.P @ w + self.q @ w + 0.5 * alpha @ self.R @ alpha + alpha @ self.E @ w)

    def val_grad_w(self, w: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        return 0.5 * (self.P + self.P.T) @ w + self.q + self.E.T @ alpha

    def val_grad_alpha(self, w: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        return 0.5 * (self.R + self.R.T) @ alpha + self.E @ w

    def outer_objective(self, alpha: np.ndarray) -> float:
        alpha = np.asarray(alpha, dtype=np.float64)
        return self.val_loss(self.w_star(alpha), alpha)


def implicit_gradient_exact(problem: QuadraticBilevelProblem, alpha: np.ndarray) -> np.ndarray:
    """
    Exact ∇_α F by the implicit function theorem.

    ∇F = ∇_α L_val − ∇²_{α,w} L_train (∇²_w L_train)⁻¹ ∇_w L_val, with both
    second derivatives constant for the quadratic lower level: ∂w*/∂α = A⁻¹B.

    Raises:
        BilevelProblemError: If `problem` is not a quadratic bilevel problem
    """
    if not isinstance(problem, QuadraticBilevelProblem):
        raise BilevelProblemError(f"exact implicit gradient needs a quadratic problem, got {type(problem).__name__}")
    alpha = np.asarray(alpha, dtype=np.float64).reshape(problem.arch_dim)
    w = problem.w_star(alpha)
    dw_dalpha = np.linalg.solve(problem.A, problem.B)
    return problem.val_grad_alpha(w, alpha) + dw_dalpha.T @ problem.val_grad_w(w, alpha)


def zo_forward_difference(
    objective: Callable[[np.ndarray], float], alpha: np.ndarray, u: np.ndarray, mu: float
) -> np.ndarray:
    """((F(α + μu) − F(α))/μ)·u for an objective evaluated directly."""
    if not mu > 0:
        raise SearchError(f"mu must be positive, got {mu}")
    alpha = np.asarray(alpha, dtype=np.float64)
    return ((objective(alpha + mu * u) - objective(alpha)) / mu) * u


class QuadraticModel(BilevelModel):
    """QuadraticBilevelProblem exposed through the BilevelModel interface."""

    def __init__(self, problem: QuadraticBilevelProblem, w0: np.ndarray, alpha0: np.ndarray):
        self.problem = problem
        self.w = Tensor(np.asarray(w0, dtype=np.float64).reshape(problem.weight_dim), requires_grad=True, name="w")
        self.alpha = Tensor(
            np.asarray(alpha0, dtype=np.float64).reshape(problem.arch_dim), requires_grad=True, name="alpha"
        )

    def weight_parameters(self) -> List[Tensor]:
        return [self.w]

    def arch_group(self, epoch: int) -> List[Tensor]:
        return [self.alpha]

    def train_gradients(self, batch: Batch, epoch: int) -> Tuple[float, List[np.ndarray]]:
        w, a = self.w.data, self.alpha.data
        return self.problem.train_loss(w, a), [self.problem.train_grad_w(w, a)]

    def validation_gradients(self, batch: Batch, epoch: int, penalty: PenaltyTerms) -> ValidationResult:
        w, a = self.w.data, self.alpha.data
        return ValidationResult(
            loss=self.problem.val_loss(w, a),
            penalty=0.0,
            expected_params=None,
            weight_grads=[self.problem.val_grad_w(w, a)],
            arch_grads=[self.problem.val_grad_alpha(w, a)],
        )

    def clone(self) -> "QuadraticModel":
        return QuadraticModel(self.problem, self.w.data.copy(), self.alpha.data.copy())

    def assign_from(self, other: BilevelModel) -> None:
        if not isinstance(other, QuadraticModel):
            raise SearchError(f"cannot assign {type(other).__name__} onto a quadratic model")
        _assign_tensors([self.w, self.alpha], [other.w, other.alpha])


# ---------------------------------------------------------------------------
# Data streams
# ---------------------------------------------------------------------------


class BatchStream:
    """
    Shuffled mini-batches over an array pair.

    The order is seeded by (seed, epoch, stream id) and restarts at each
    epoch; running past the end starts a new shuffled pass.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, batch_size: int, seed: int, stream_id: int):
        if len(x) != len(y) or len(x) == 0:
            raise SearchError(f"stream {stream_id}: {len(x)} samples for {len(y)} labels")
        self.x = x
        self.y = y
        self.batch_size = min(batch_size, len(x))
        self.seed = seed
        self.stream_id = stream_id
        self.consumed = 0
        self.start_epoch(0)

    def start_epoch(self, epoch: int) -> None:
        self._rng = np.random.default_rng([self.seed, epoch, self.stream_id])
        self._order = self._rng.permutation(len(self.x))
        self._position = 0

    def next_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._position + self.batch_size > len(self._order):
            self._order = self._rng.permutation(len(self.x))
            self._position = 0
        idx = self._order[self._position : self._position + self.batch_size]
        self._position += self.batch_size
        self.consumed += 1
        return self.x[idx], self.y[idx]


@dataclass
class SearchData:
    """Float images [N, C, H, W] and integer labels for the two search streams."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


# ---------------------------------------------------------------------------
# One α-update
# ---------------------------------------------------------------------------


def inner_train_steps(
    model: BilevelModel,
    surrogate: BilevelModel,
    train_stream: Optional[BatchStream],
    steps: int,
    weight_optimizer: Optimizer,
    surrogate_optimizer: Optimizer,
    epoch: int,
) -> List[float]:
    """
    Train model and surrogate `steps` times on identical batches.

    Returns:
        The primary model's training loss at each step
    """
    losses = []
    for _ in range(steps):
        batch = train_stream.next_batch() if train_stream is not None else None
        loss, grads = model.train_gradients(batch, epoch)
        weight_optimizer.step(model.weight_parameters(), grads)
        _, s_grads = surrogate.train_gradients(batch, epoch)
        surrogate_optimizer.step(surrogate.weight_parameters(), s_grads)
        losses.append(loss)
    return losses


@dataclass
class HypergradientEstimate:
    """ZO estimate over α′ plus the validation quantities it was built from."""

    grads: List[np.ndarray]
    directional: float
    val_loss: float
    penalty: float
    expected_params: Optional[float]


def zo_hypergradient(
    model: BilevelModel,
    surrogate: BilevelModel,
    direction: PerturbationDirection,
    mu: float,
    val_batch: Batch,
    epoch: int,
    penalty: PenaltyTerms = PenaltyTerms(),
) -> HypergradientEstimate:
    """
    [∇_α′ L_val′·u + ((w̃ − w*)/μ)·∇_w L_val′]·u at (w*, α′).

    Raises:
        SearchError: If mu is not positive
    """
    if not mu > 0:
        raise SearchError(f"mu must be positive, got {mu}")
    result = model.validation_gradients(val_batch, epoch, penalty)
    group = model.arch_group(epoch)
    u_parts = direction.split([p.shape for p in group])
    directional = sum(float(np.vdot(g, u)) for g, u in zip(result.arch_grads, u_parts))
    for w, w_tilde, g in zip(model.weight_parameters(), surrogate.weight_parameters(), result.weight_grads):
        directional += float(np.vdot((w_tilde.data - w.data) / mu, g))
    return HypergradientEstimate(
        grads=[directional * u for u in u_parts],
        directional=directional,
        val_loss=result.loss,
        penalty=result.penalty,
        expected_params=result.expected_params,
    )


def perturb_surrogate(surrogate: BilevelModel, direction: PerturbationDirection, mu: float, epoch: int) -> None:
    """α̃′ = α′ + μ·u in place."""
    group = surrogate.arch_group(epoch)
    for p, u in zip(group, direction.split([p.shape for p in group])):
        p.data = p.data + mu * u


@dataclass
class RoundResult:
    estimate: HypergradientEstimate
    train_losses: List[float]


def bilevel_round(
    model: BilevelModel,
    weight_optimizer: Optimizer,
    direction: PerturbationDirection,
    mu: float,
    steps: int,
    epoch: int,
    train_stream: Optional[BatchStream] = None,
    val_batch: Batch = None,
    penalty: PenaltyTerms = PenaltyTerms(),
    surrogate: Optional[BilevelModel] = None,
) -> RoundResult:
    """
    Refresh the surrogate, train both models and return the ZO estimate.

    A `surrogate` from an earlier round is overwritten in place; otherwise a
    fresh clone of `model` is made.
    """
    if surrogate is None:
        surrogate = model.clone()
    else:
        surrogate.assign_from(model)
    surrogate_optimizer = weight_optimizer.clone()
    perturb_surrogate(surrogate, direction, mu, epoch)
    losses = inner_train_steps(model, surrogate, train_stream, steps, weight_optimizer, surrogate_optimizer, epoch)
    estimate = zo_hypergradient(model, surrogate, direction, mu, val_batch, epoch, penalty)
    return RoundResult(estimate, losses)


# ---------------------------------------------------------------------------
# Trace and state
# ---------------------------------------------------------------------------


def _array_or_none(value: Optional[List[Any]]) -> Optional[np.ndarray]:
    return None if value is None else np.asarray(value, dtype=np.float64)


@dataclass
class EpochRecord:
    """End-of-epoch snapshot of probabilities, size and losses."""

    epoch: int
    tau_eff: float
    lambda_: float
    mu: float
    lr_w: float
    expected_params: float
    train_loss: float
    val_loss: float
    penalty: float
    size_variable: bool
    alpha_probs: np.ndarray
    beta_probs: Optional[np.ndarray] = None
    gamma_probs: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "tau_eff": self.tau_eff,
            "lambda": self.lambda_,
            "mu": self.mu,
            "lr_w": self.lr_w,
            "expected_params": self.expected_params,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "penalty": self.penalty,
            "size_variable": self.size_variable,
            "alpha_probs": self.alpha_probs.tolist(),
            "beta_probs": None if self.beta_probs is None else self.beta_probs.tolist(),
            "gamma_probs": None if self.gamma_probs is None else self.gamma_probs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EpochRecord":
        return cls(
            epoch=int(data["epoch"]),
            tau_eff=float(data["tau_eff"]),
            lambda_=float(data["lambda"]),
            mu=float(data["mu"]),
            lr_w=float(data["lr_w"]),
            expected_params=float(data["expected_params"]),
            train_loss=float(data["train_loss"]),
            val_loss=float(data["val_loss"]),
            penalty=float(data["penalty"]),
            size_variable=bool(data["size_variable"]),
            alpha_probs=np.asarray(data["alpha_probs"], dtype=np.float64),
            beta_probs=_array_or_none(data.get("beta_probs")),
            gamma_probs=_array_or_none(data.get("gamma_probs")),
        )


@dataclass
class SearchTrace:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> EpochRecord:
        if not self.records:
            raise SearchError("trace is empty")
        return self.records[-1]

    def to_list(self) -> List[Dict[str, Any]]:
        return [r.to_dict() for r in self.records]

    @classmethod
    def from_list(cls, items: List[Dict[str, Any]]) -> "SearchTrace":
        return cls([EpochRecord.from_dict(item) for item in items])


def make_weight_optimizer(config: SearchConfig) -> MomentumSGD:
    return MomentumSGD(config.lr_w, momentum=config.momentum, weight_decay=config.weight_decay)


def make_arch_optimizers(config: SearchConfig) -> Dict[str, Adam]:
    """One adaptive-moment optimizer for α, one for {β, γ} (own step counters)."""
    return {
        "alpha": Adam(config.lr_alpha, betas=config.alpha_betas),
        "size": Adam(config.lr_alpha, betas=config.alpha_betas),
    }


@dataclass
class SearchState:
    """Everything needed to continue a search at `epoch`."""

    config: SearchConfig
    net: Supernet
    epoch: int
    weight_optimizer: MomentumSGD
    arch_optimizers: Dict[str, Adam]
    rng_state: Dict[str, Any]
    trace: SearchTrace

    @classmethod
    def initial(cls, net: Supernet, config: SearchConfig) -> "SearchState":
        rng = np.random.default_rng([config.seed, 2])
        return cls(
            config=config,
            net=net,
            epoch=0,
            weight_optimizer=make_weight_optimizer(config),
            arch_optimizers=make_arch_optimizers(config),
            rng_state=rng.bit_generator.state,
            trace=SearchTrace(),
        )

    def snapshot(self) -> "SearchState":
        return SearchState(
            config=self.config,
            net=self.net.copy(),
            epoch=self.epoch,
            weight_optimizer=copy.deepcopy(self.weight_optimizer),
            arch_optimizers=copy.deepcopy(self.arch_optimizers),
            rng_state=copy.deepcopy(self.rng_state),
            trace=SearchTrace(list(self.trace.records)),
        )


@dataclass
class SearchResult:
    trace: SearchTrace
    net: Supernet
    state: SearchState
    epoch_seconds: List[float] = field(default_factory=list)

    @property
    def stopped_early(self) -> bool:
        return self.state.epoch < self.state.config.epochs


def _all_finite(values: Sequence[float]) -> bool:
    return all(math.isfinite(v) for v in values)


def _record_epoch(
    net: Supernet,
    config: SearchConfig,
    epoch: int,
    mu: float,
    lr_w: float,
    train_losses: List[float],
    val_losses: List[float],
    penalties: List[float],
) -> EpochRecord:
    rule = config.rule
    size_variable = epoch >= config.theta
    with no_grad():
        probs = net.probabilities(rule, epoch, size_variable)
        c = net.expected_param_count(probs).item()
    alpha, beta, gamma = probs.arrays()
    return EpochRecord(
        epoch=epoch,
        tau_eff=rule.temperature(epoch),
        lambda_=lambda_schedule(config.schedule, epoch, config.lambda_scale)[0],
        mu=mu,
        lr_w=lr_w,
        expected_params=c,
        train_loss=float(np.mean(train_losses)),
        val_loss=float(np.mean(val_losses)),
        penalty=float(np.mean(penalties)),
        size_variable=size_variable,
        alpha_probs=alpha,
        beta_probs=beta,
        gamma_probs=gamma,
    )


def updates_per_epoch(config: SearchConfig, num_val: int) -> int:
    if config.steps_per_epoch is not None:
        return config.steps_per_epoch
    return max(1, math.ceil(num_val / config.batch_size))


def search(
    net: Supernet,
    data: SearchData,
    config: SearchConfig,
    resume: Optional[SearchState] = None,
    on_epoch: Optional[Callable[[SearchState, EpochRecord], None]] = None,
) -> SearchResult:
    """
    Run the bilevel search from epoch 0, or from `resume.epoch`.

    Args:
        net: Supernet to search (ignored when resuming; the state's net is used)
        data: Training and validation arrays
        config: Search hyperparameters
        resume: State saved at the end of an earlier epoch
        on_epoch: Called after each epoch with the current state and record

    Raises:
        NonFiniteLossError: On NaN/Inf losses or estimates, with the state at the
            start of the failing epoch
    """
    state = resume if resume is not None else SearchState.initial(net, config)
    state.config = config
    net = state.net
    rule = config.rule
    model = SupernetModel(net, rule, config.theta)
    surrogate = model.clone()
    rng = np.random.default_rng([config.seed, 2])
    rng.bit_generator.state = state.rng_state
    train_stream = BatchStream(data.train_x, data.train_y, config.batch_size, config.seed, 0)
    val_stream = BatchStream(data.val_x, data.val_y, config.batch_size, config.seed, 1)
    steps = updates_per_epoch(config, len(data.val_x))
    timings: List[float] = []

    for epoch in range(state.epoch, config.last_epoch):
        started = time.perf_counter()
        last_good = state.snapshot()
        size_variable = epoch >= config.theta
        group = model.arch_group(epoch)
        group_size = sum(p.size for p in group)
        mu = perturbation_scale(config.mu_scale, group_size)
        lambda1, lambda2 = lambda_schedule(config.schedule, epoch, config.lambda_scale)
        penalty = PenaltyTerms(config.bounds, lambda1, lambda2) if size_variable else PenaltyTerms()
        lr_w = cosine_lr(config.lr_w, config.lr_w_min, epoch, config.epochs)
        state.weight_optimizer.state.lr = lr_w
        train_stream.start_epoch(epoch)
        val_stream.start_epoch(epoch)

        train_losses: List[float] = []
        val_losses: List[float] = []
        penalties: List[float] = []
        for step in range(steps):
            direction = draw_direction(group_size, rng)
            outcome = bilevel_round(
                model,
                state.weight_optimizer,
                direction,
                mu,
                config.inner_steps,
                epoch,
                train_stream=train_stream,
                val_batch=val_stream.next_batch(),
                penalty=penalty,
                surrogate=surrogate,
            )
            est = outcome.estimate
            if not _all_finite(outcome.train_losses + [est.val_loss, est.penalty, est.directional]):
                raise NonFiniteLossError(
                    f"Non-finite loss at epoch {epoch}, step {step} "
                    f"(train={outcome.train_losses[-1]}, val={est.val_loss}, estimate={est.directional})",
                    last_good=last_good,
                )
            state.arch_optimizers["alpha"].step(group[:1], est.grads[:1])
            if size_variable:
                state.arch_optimizers["size"].step(group[1:], est.grads[1:])
            train_losses.extend(outcome.train_losses)
            val_losses.append(est.val_loss)
            penalties.append(est.penalty)
            logger.debug(
                f"epoch {epoch} step {step}: val={est.val_loss:.6f} penalty={est.penalty:.6f} "
                f"directional={est.directional:.6e}"
            )

        record = _record_epoch(net, config, epoch, mu, lr_w, train_losses, val_losses, penalties)
        state.trace.records.append(record)
        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        timings.append(time.perf_counter() - started)
        logger.info(
            f"epoch {epoch}: tau={record.tau_eff:.6g} lambda={record.lambda_:.6g} mu={mu:.6g} "
            f"C={record.expected_params:.1f} train={record.train_loss:.4f} val={record.val_loss:.4f} "
            f"penalty={record.penalty:.4f}"
        )
        if on_epoch is not None:
            on_epoch(state, record)

    return SearchResult(trace=state.trace, net=net, state=state, epoch_seconds=timings)
