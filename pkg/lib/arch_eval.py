"""
Architecture evaluation - sampling, retraining and size tiers.

Workflow after a search:

1. sample discrete architectures from the supernet's final probabilities
2. materialize each one as a standalone model (fresh weights)
3. retrain with the early discard rules
4. aggregate accuracies and parameter counts per searched supernet

Size tiers S/M/L are nearest-rank percentile bounds over the parameter
counts of many sampled architectures.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from lib.simplex_norm import ProbabilityRule
from lib.supernet import (
    KXK_INDEX,
    OPERATIONS,
    ArchitectureMismatchError,
    ArchProbabilities,
    BatchNormConstants,
    Block,
    CellTopology,
    FixedBlocks,
    OperationKind,
    Supernet,
    SupernetConfig,
    build_fixed_blocks,
    fixed_param_count,
    operation_cost,
)
from lib.tensor_engine import (
    MomentumSGD,
    Tensor,
    add,
    avg_pool,
    backward,
    batch_norm_lite,
    conv2d,
    cosine_lr,
    cross_entropy_loss,
    no_grad,
    relu,
    zero_grads,
)


logger = logging.getLogger(__name__)


class EvaluationError(Exception):
    """Raised for invalid evaluation inputs (empty distributions, unknown tiers)"""

    pass


# ---------------------------------------------------------------------------
# Discrete architectures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteArchitecture:
    """
    One concrete network drawn from the supernet.

    Attributes:
        config: Structural config of the supernet it came from
        ops: ops[s][e] is the operation chosen for edge e of stage s
        kernels: kernels[s][e] is the kernel size of the KxK conv on that edge
        depths: depths[s] is the number of cells run in stage s
    """

    config: SupernetConfig
    ops: Tuple[Tuple[OperationKind, ...], ...]
    kernels: Tuple[Tuple[int, ...], ...]
    depths: Tuple[int, ...]

    def __post_init__(self) -> None:
        validate_architecture(self)

    @property
    def size_variable(self) -> bool:
        """True when every stage depth is a depth candidate (expressible by one-hot γ)."""
        return all(d in self.config.depths for d in self.depths)

    def param_count(self) -> int:
        return discrete_param_count(self)

    def key(self) -> Tuple[Any, ...]:
        return (tuple(tuple(o.value for o in row) for row in self.ops), self.kernels, self.depths)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ops": [[o.value for o in row] for row in self.ops],
            "kernels": [list(row) for row in self.kernels],
            "depths": list(self.depths),
            "params": self.param_count(),
        }

    @classmethod
    def from_dict(cls, config: SupernetConfig, data: Dict[str, Any]) -> "DiscreteArchitecture":
        try:
            return cls(
                config=config,
                ops=tuple(tuple(OperationKind(v) for v in row) for row in data["ops"]),
                kernels=tuple(tuple(int(k) for k in row) for row in data["kernels"]),
                depths=tuple(int(d) for d in data["depths"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise ArchitectureMismatchError(f"Malformed architecture record: {e}") from e


def validate_architecture(arch: DiscreteArchitecture) -> None:
    """
    Raises:
        ArchitectureMismatchError: If a choice lies outside its candidate set
    """
    config = arch.config
    s, n = config.num_stages, config.edge_count
    if len(arch.ops) != s or any(len(row) != n for row in arch.ops):
        raise ArchitectureMismatchError(f"ops must be {s} stages x {n} edges")
    if len(arch.kernels) != s or any(len(row) != n for row in arch.kernels):
        raise ArchitectureMismatchError(f"kernels must be {s} stages x {n} edges")
    if len(arch.depths) != s:
        raise ArchitectureMismatchError(f"depths must have {s} entries, got {len(arch.depths)}")
    for row in arch.ops:
        for op in row:
            if not isinstance(op, OperationKind):
                raise ArchitectureMismatchError(f"unknown operation {op!r}")
    for row in arch.kernels:
        for k in row:
            if k not in config.kernel_sizes:
                raise ArchitectureMismatchError(f"kernel {k} not in {config.kernel_sizes}")
    allowed_depths = set(config.depths) | {config.cells_per_stage}
    for d in arch.depths:
        if d not in allowed_depths:
            raise ArchitectureMismatchError(f"depth {d} not in {sorted(allowed_depths)}")


def discrete_param_count(arch: DiscreteArchitecture) -> int:
    """Fixed blocks plus, per stage, depth × Σ_edges cost(op, kernel)."""
    config = arch.config
    total = fixed_param_count(config)
    for s in range(config.num_stages):
        c = config.stage_channels(s)
        cell = sum(operation_cost(op, c, k) for op, k in zip(arch.ops[s], arch.kernels[s]))
        total += arch.depths[s] * cell
    return total


def snapshot_probabilities(net: Supernet, rule: ProbabilityRule, epoch: int, size_variable: bool) -> ArchProbabilities:
    """Detached probabilities of a supernet at `epoch` (final temperature for sampling)."""
    with no_grad():
        probs = net.probabilities(rule, epoch, size_variable)
    return ArchProbabilities.from_arrays(*probs.arrays())


def one_hot_probabilities(arch: DiscreteArchitecture) -> ArchProbabilities:
    """The probability assignment that puts all mass on `arch`'s choices."""
    config = arch.config
    s, n = config.num_stages, config.edge_count
    alpha = np.zeros((s, n, len(OPERATIONS)))
    for i, row in enumerate(arch.ops):
        for e, op in enumerate(row):
            alpha[i, e, OPERATIONS.index(op)] = 1.0
    if not arch.size_variable:
        return ArchProbabilities.from_arrays(alpha)
    beta = np.zeros((s, n, len(config.kernel_sizes)))
    gamma = np.zeros((s, len(config.depths)))
    for i in range(s):
        for e, k in enumerate(arch.kernels[i]):
            beta[i, e, config.kernel_sizes.index(k)] = 1.0
        gamma[i, config.depths.index(arch.depths[i])] = 1.0
    return ArchProbabilities.from_arrays(alpha, beta, gamma)


def _categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    p = np.asarray(p, dtype=np.float64)
    return int(rng.choice(p.size, p=p / p.sum()))


def sample_architecture(
    config: SupernetConfig, probs: ArchProbabilities, rng: np.random.Generator
) -> DiscreteArchitecture:
    """
    Independent categorical draws per edge operation, KxK kernel and stage depth.

    Kernels are drawn only for edges whose operation is the KxK conv; other
    edges and snapshots taken before size-variable search record k_max and
    the full cell count.
    """
    alpha, beta, gamma = probs.arrays()
    s, n = config.num_stages, config.edge_count
    if alpha.shape != (s, n, len(OPERATIONS)):
        raise ArchitectureMismatchError(f"alpha probabilities {alpha.shape} do not fit the config")
    ops, kernels, depths = [], [], []
    for i in range(s):
        row_ops, row_k = [], []
        for e in range(n):
            o = _categorical(alpha[i, e], rng)
            row_ops.append(OPERATIONS[o])
            if beta is not None and o == KXK_INDEX:
                row_k.append(config.kernel_sizes[_categorical(beta[i, e], rng)])
            else:
                row_k.append(config.k_max)
        ops.append(tuple(row_ops))
        kernels.append(tuple(row_k))
        depths.append(config.depths[_categorical(gamma[i], rng)] if gamma is not None else config.cells_per_stage)
    return DiscreteArchitecture(config, tuple(ops), tuple(kernels), tuple(depths))


def derive_argmax_architecture(config: SupernetConfig, probs: ArchProbabilities) -> DiscreteArchitecture:
    """Highest-probability choice everywhere; ties go to the lower index."""
    alpha, beta, gamma = probs.arrays()
    ops = tuple(tuple(OPERATIONS[int(np.argmax(p))] for p in stage) for stage in alpha)
    if beta is None or gamma is None:
        kernels = tuple(tuple(config.k_max for _ in stage) for stage in alpha)
        depths = tuple(config.cells_per_stage for _ in alpha)
    else:
        kernels = tuple(
            tuple(
                config.kernel_sizes[int(np.argmax(beta[i, e]))] if ops[i][e] is OperationKind.CONV_KXK else config.k_max
                for e in range(config.edge_count)
            )
            for i in range(config.num_stages)
        )
        depths = tuple(config.depths[int(np.argmax(g))] for g in gamma)
    return DiscreteArchitecture(config, ops, kernels, depths)


# ---------------------------------------------------------------------------
# Materialized models
# ---------------------------------------------------------------------------


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class DiscreteEdge(Block):
    """A single chosen operation; convolutions are ReLU → conv → non-affine BN."""

    def __init__(
        self, name: str, op: OperationKind, kernel: int, channels: int, rng: np.random.Generator, epsilon: float
    ):
        self.name = name
        self.op = op
        self.kernel = kernel
        self.epsilon = epsilon
        self.weight: Optional[Tensor] = None
        self.bias: Optional[Tensor] = None
        if op in (OperationKind.CONV_1X1, OperationKind.CONV_KXK):
            k = 1 if op is OperationKind.CONV_1X1 else kernel
            self.kernel = k
            self.weight = Tensor(_he_normal(rng, (channels, channels, k, k), channels * k * k), True, f"{name}.weight")
            self.bias = Tensor(np.zeros(channels), True, f"{name}.bias")
            self.bn = BatchNormConstants(channels)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        if self.weight is not None and self.bias is not None:
            yield self.weight.name, self.weight  # type: ignore[misc]
            yield self.bias.name, self.bias  # type: ignore[misc]

    def forward(self, x: Tensor) -> Optional[Tensor]:
        if self.op is OperationKind.ZEROISE:
            return None
        if self.op is OperationKind.SKIP_CONNECT:
            return x
        if self.op is OperationKind.AVG_POOL_3X3:
            return avg_pool(x, 3, 1, 1)
        out = conv2d(relu(x), self.weight, self.bias, 1, self.kernel // 2)  # type: ignore[arg-type]
        return batch_norm_lite(out, self.bn.scale, self.bn.shift, self.epsilon)


class DiscreteCell(Block):
    def __init__(
        self,
        name: str,
        ops: Sequence[OperationKind],
        kernels: Sequence[int],
        channels: int,
        config: SupernetConfig,
        rng: np.random.Generator,
    ):
        self.name = name
        self.topology = CellTopology.complete(config.node_count)
        self.edges = [
            DiscreteEdge(f"{name}.edges.{e}", op, k, channels, rng, config.bn_epsilon)
            for e, (op, k) in enumerate(zip(ops, kernels))
        ]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for edge in self.edges:
            yield from edge.named_parameters()

    def forward(self, x: Tensor) -> Tensor:
        nodes: List[Optional[Tensor]] = [x]
        for j in range(1, self.topology.node_count):
            total: Optional[Tensor] = None
            for e, (src, dst) in enumerate(self.topology.edges):
                if dst != j or nodes[src] is None:
                    continue
                out = self.edges[e].forward(nodes[src])  # type: ignore[arg-type]
                if out is not None:
                    total = out if total is None else add(total, out)
            nodes.append(total)
        return nodes[-1] if nodes[-1] is not None else Tensor(np.zeros_like(x.data))


class DiscreteModel(Block):
    """
    Standalone network for one DiscreteArchitecture.

    Usage:
        model = materialize(arch, seed=3)
        logits = model.forward(batch)
    """

    def __init__(self, arch: DiscreteArchitecture, rng: np.random.Generator):
        self.arch = arch
        config = arch.config
        fixed: FixedBlocks = build_fixed_blocks(config, rng)
        self.stem = fixed.stem
        self.reductions = fixed.reductions
        self.classifier = fixed.classifier
        self.stages: List[List[DiscreteCell]] = [
            [
                DiscreteCell(
                    f"stages.{s}.cells.{c}", arch.ops[s], arch.kernels[s], config.stage_channels(s), config, rng
                )
                for c in range(arch.depths[s])
            ]
            for s in range(config.num_stages)
        ]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.stem.named_parameters()
        for s, cells in enumerate(self.stages):
            for cell in cells:
                yield from cell.named_parameters()
            if s < len(self.reductions):
                yield from self.reductions[s].named_parameters()
        yield from self.classifier.named_parameters()

    def forward(self, x: np.ndarray) -> Tensor:
        out = self.stem.forward(x if isinstance(x, Tensor) else Tensor(x))
        for s, cells in enumerate(self.stages):
            for cell in cells:
                out = cell.forward(out)
            if s < len(self.reductions):
                out = self.reductions[s].forward(out)
        return self.classifier.forward(out)

    def copy_weights_from(self, net: Supernet) -> None:
        """Load the supernet's weights for the chosen path (centered crops for KxK)."""
        source = dict(net.named_weights())
        for name, param in self.named_parameters():
            if name in source:
                param.data = source[name].data.copy()
        for s, cells in enumerate(self.stages):
            for c, cell in enumerate(cells):
                for e, edge in enumerate(cell.edges):
                    src = net.stages[s].cells[c].edges[e]
                    if edge.op is OperationKind.CONV_1X1:
                        edge.weight.data = src.conv1x1_weight.data.copy()  # type: ignore[union-attr]
                        edge.bias.data = src.conv1x1_bias.data.copy()  # type: ignore[union-attr]
                    elif edge.op is OperationKind.CONV_KXK:
                        edge.weight.data = src.bank.crop(edge.kernel).data.copy()  # type: ignore[union-attr]
                        edge.bias.data = src.bank.biases[edge.kernel].data.copy()  # type: ignore[union-attr]


def materialize(
    arch: DiscreteArchitecture, net: Optional[Supernet] = None, seed: int = 0, copy_weights: bool = False
) -> DiscreteModel:
    """
    Build a trainable model with only the chosen operations, kernels and depths.

    Weights are freshly initialized from `seed`. With `copy_weights` the
    supernet's weights are loaded instead (diagnostic comparison only).

    Raises:
        ArchitectureMismatchError: If `arch` does not fit `net`'s config
    """
    if net is not None and net.config != arch.config:
        raise ArchitectureMismatchError("architecture was sampled from a different supernet config")
    model = DiscreteModel(arch, np.random.default_rng(seed))
    if copy_weights:
        if net is None:
            raise ArchitectureMismatchError("copy_weights needs the source supernet")
        model.copy_weights_from(net)
    return model


# ---------------------------------------------------------------------------
# Retraining
# ---------------------------------------------------------------------------


class RetrainRules(BaseModel):
    """Early discard predicates checked once, at `checkpoint_epoch` (1-based)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    checkpoint_epoch: int = Field(default=20, ge=1)
    min_accuracy: float = Field(default=0.30, ge=0, le=1)
    min_improvement: float = Field(default=0.01)


class RetrainConfig(BaseModel):
    """Standalone training of a materialized architecture."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(default=64, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=0.025, gt=0)
    lr_min: float = Field(default=0.001, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=3e-4, ge=0)
    eval_batch_size: Optional[int] = Field(default=None, ge=1)
    rules: RetrainRules = RetrainRules()
    seed: int = 0


@dataclass
class RetrainData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class RetrainOutcome:
    """Final metrics, or the reason the model was discarded."""

    params: int
    discarded: bool
    best_val_acc: float
    test_acc: Optional[float]
    epochs_run: int
    reason: Optional[str] = None
    history: List[float] = field(default_factory=list)


def apply_discard_rules(history: Sequence[float], rules: RetrainRules) -> Optional[str]:
    """
    Check validation accuracies (history[i] = accuracy after epoch i+1).

    Returns:
        A discard reason once the checkpoint epoch is reached, else None
    """
    if len(history) < rules.checkpoint_epoch:
        return None
    acc = history[rules.checkpoint_epoch - 1]
    if acc < rules.min_accuracy:
        return f"accuracy {acc:.4f} below {rules.min_accuracy:.2f} at epoch {rules.checkpoint_epoch}"
    gain = acc - history[0]
    if gain < rules.min_improvement:
        return f"improvement {gain:.4f} since epoch 1 below {rules.min_improvement:.2f}"
    return None


def accuracy(model: DiscreteModel, x: np.ndarray, y: np.ndarray, batch_size: Optional[int] = None) -> float:
    """Top-1 accuracy with batch statistics of each evaluated batch."""
    step = batch_size or len(x)
    correct = 0
    with no_grad():
        for start in range(0, len(x), step):
            logits = model.forward(x[start : start + step]).data
            correct += int((logits.argmax(axis=1) == y[start : start + step]).sum())
    return correct / len(x)


def retrain_with_discard(
    model: DiscreteModel, data: RetrainData, config: RetrainConfig = RetrainConfig()
) -> RetrainOutcome:
    """
    Train to the epoch budget, applying the discard rules at the checkpoint epoch.

    Returns:
        Best validation accuracy, test accuracy and parameter count; a
        discarded outcome carries no test accuracy
    """
    params = model.parameters()
    count = model.param_count()
    optimizer = MomentumSGD(config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 7])
    n = len(data.train_x)
    batch = min(config.batch_size, n)
    history: List[float] = []

    for epoch in range(config.epochs):
        optimizer.state.lr = cosine_lr(config.lr, config.lr_min, epoch, config.epochs)
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            idx = order[start : start + batch]
            zero_grads(params)
            loss = cross_entropy_loss(model.forward(data.train_x[idx]), data.train_y[idx])
            backward(loss)
            optimizer.step(params)
        history.append(accuracy(model, data.val_x, data.val_y, config.eval_batch_size))
        if epoch + 1 == config.rules.checkpoint_epoch:
            reason = apply_discard_rules(history, config.rules)
            if reason is not None:
                logger.info(f"Discarded after epoch {epoch + 1}: {reason}")
                return RetrainOutcome(count, True, max(history), None, epoch + 1, reason, history)

    test_acc = accuracy(model, data.test_x, data.test_y, config.eval_batch_size)
    return RetrainOutcome(count, False, max(history), test_acc, config.epochs, None, history)


# ---------------------------------------------------------------------------
# Size tiers
# ---------------------------------------------------------------------------


TIER_PERCENTILES: Dict[str, Tuple[int, int]] = {"S": (0, 20), "M": (40, 60), "L": (80, 95)}


@dataclass(frozen=True)
class SizeDistribution:
    """Sorted parameter counts of sampled architectures."""

    sizes: Tuple[int, ...]
    provenance: Dict[str, Any] = field(default_factory=dict, hash=False, compare=False)

    @classmethod
    def from_sizes(cls, sizes: Sequence[float], provenance: Optional[Dict[str, Any]] = None) -> "SizeDistribution":
        if len(sizes) == 0:
            raise EvaluationError("size distribution is empty")
        return cls(tuple(sorted(int(s) for s in sizes)), dict(provenance or {}))

    def percentile(self, p: int) -> int:
        return nearest_rank(self.sizes, p)


def nearest_rank(sorted_values: Sequence[int], p: int) -> int:
    """P_p = sorted[ceil(p·n/100) − 1], no interpolation (P_0 is the minimum)."""
    n = len(sorted_values)
    if n == 0:
        raise EvaluationError("percentile of an empty list")
    rank = -(-(p * n) // 100)
    return sorted_values[max(rank, 1) - 1]


@dataclass(frozen=True)
class ConstraintTier:
    name: str
    lower_pct: int
    upper_pct: int
    c_lower: float
    c_upper: float

    def contains(self, count: float) -> bool:
        return self.c_lower <= count <= self.c_upper


def derive_size_tiers(dist: SizeDistribution) -> Dict[str, ConstraintTier]:
    """S = (0, P20], M = [P40, P60], L = [P80, P95]."""
    tiers = {}
    for name, (lo, hi) in TIER_PERCENTILES.items():
        lower = 0.0 if name == "S" else float(dist.percentile(lo))
        tiers[name] = ConstraintTier(name, lo, hi, lower, float(dist.percentile(hi)))
    logger.debug(", ".join(f"{t.name}=[{t.c_lower:g}, {t.c_upper:g}]" for t in tiers.values()))
    return tiers


def sample_size_distribution(
    config: SupernetConfig, probs: ArchProbabilities, count: int, rng: np.random.Generator
) -> List[int]:
    return [sample_architecture(config, probs, rng).param_count() for _ in range(count)]


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------


class CampaignConfig(BaseModel):
    """Sampling and retraining across several searched supernets."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    samples_per_supernet: int = Field(default=3, ge=1)
    tier: Optional[str] = None
    retrain: RetrainConfig = RetrainConfig()
    seed: int = 0


@dataclass(frozen=True)
class SupernetSnapshot:
    """Final probabilities of one searched supernet."""

    name: str
    config: SupernetConfig
    probs: ArchProbabilities


@dataclass(frozen=True)
class RetrainJob:
    checkpoint: str
    sample_id: int
    seed: int
    arch: DiscreteArchitecture
    config: RetrainConfig


@dataclass(frozen=True)
class ReportRow:
    checkpoint: str
    seed: int
    sample_id: int
    discarded: bool
    params: int
    best_val_acc: float
    test_acc: Optional[float]


@dataclass
class CampaignReport:
    rows: List[ReportRow]
    omitted: Dict[str, int]
    checkpoints: List[str]

    def survivors(self, checkpoint: str) -> List[ReportRow]:
        return [r for r in self.rows if r.checkpoint == checkpoint and not r.discarded]

    def summary(self) -> List[Dict[str, Any]]:
        """Per checkpoint: jobs run, discards, mean/std test accuracy, mean params."""
        out = []
        for name in self.checkpoints:
            rows = [r for r in self.rows if r.checkpoint == name]
            kept = [r for r in rows if not r.discarded]
            accs = [r.test_acc for r in kept if r.test_acc is not None]
            out.append(
                {
                    "checkpoint": name,
                    "retrained": len(rows),
                    "discarded": len(rows) - len(kept),
                    "mean_test_acc": float(np.mean(accs)) if accs else math.nan,
                    "std_test_acc": float(np.std(accs)) if accs else math.nan,
                    "mean_params": float(np.mean([r.params for r in kept])) if kept else math.nan,
                }
            )
        return out


_worker_data: Optional[RetrainData] = None


def _init_worker(data: RetrainData) -> None:
    global _worker_data
    _worker_data = data


def run_retrain_job(job: RetrainJob, data: Optional[RetrainData] = None) -> ReportRow:
    data = data if data is not None else _worker_data
    if data is None:
        raise EvaluationError("retrain worker has no data")
    model = materialize(job.arch, seed=job.seed)
    outcome = retrain_with_discard(model, data, job.config.model_copy(update={"seed": job.seed}))
    logger.info(
        f"{job.checkpoint} sample {job.sample_id}: params={outcome.params} "
        f"{'discarded' if outcome.discarded else f'test_acc={outcome.test_acc:.4f}'}"
    )
    return ReportRow(
        checkpoint=job.checkpoint,
        seed=job.seed,
        sample_id=job.sample_id,
        discarded=outcome.discarded,
        params=outcome.params,
        best_val_acc=outcome.best_val_acc,
        test_acc=outcome.test_acc,
    )


def plan_campaign(
    snapshots: Sequence[SupernetSnapshot], config: CampaignConfig, tiers: Optional[Dict[str, ConstraintTier]] = None
) -> Tuple[List[RetrainJob], Dict[str, int]]:
    """
    Draw the architectures of every checkpoint and drop tier violators.

    Returns:
        Retrain jobs in (checkpoint order, sample id) order and the number of
        omitted samples per checkpoint

    Raises:
        EvaluationError: On an undefined tier or two snapshots with the same name
    """
    names = [snap.name for snap in snapshots]
    duplicates = sorted({name for name in names if names.count(name) > 1})
    if duplicates:
        raise EvaluationError(f"duplicate checkpoint names: {', '.join(duplicates)}")
    tier = None
    if config.tier is not None:
        if tiers is None or config.tier not in tiers:
            raise EvaluationError(f"tier {config.tier!r} requested but not defined")
        tier = tiers[config.tier]
    jobs, omitted = [], {}
    for index, snap in enumerate(snapshots):
        rng = np.random.default_rng([config.seed, index])
        omitted[snap.name] = 0
        for sample_id in range(config.samples_per_supernet):
            arch = sample_architecture(snap.config, snap.probs, rng)
            if tier is not None and not tier.contains(arch.param_count()):
                omitted[snap.name] += 1
                continue
            jobs.append(RetrainJob(snap.name, sample_id, config.retrain.seed + sample_id, arch, config.retrain))
        if omitted[snap.name]:
            logger.info(f"{snap.name}: omitted {omitted[snap.name]} samples outside tier {config.tier}")
    return jobs, omitted


def evaluation_campaign(
    snapshots: Sequence[SupernetSnapshot],
    data: RetrainData,
    config: CampaignConfig = CampaignConfig(),
    tiers: Optional[Dict[str, ConstraintTier]] = None,
    threads: int = 1,
) -> CampaignReport:
    """
    Sample, filter, retrain and aggregate over several searched supernets.

    Jobs fan out to `threads` worker processes; results are merged in
    (checkpoint, sample id) order whatever the completion order.
    """
    if not snapshots:
        raise EvaluationError("evaluation campaign needs at least one checkpoint")
    jobs, omitted = plan_campaign(snapshots, config, tiers)
    order = {snap.name: i for i, snap in enumerate(snapshots)}
    rows: List[ReportRow] = []
    if threads <= 1 or len(jobs) <= 1:
        rows = [run_retrain_job(job, data) for job in jobs]
    else:
        with ProcessPoolExecutor(
            max_workers=min(threads, len(jobs)), initializer=_init_worker, initargs=(data,)
        ) as executor:
            future_to_job = {executor.submit(run_retrain_job, job): job for job in jobs}
            for future in as_completed(future_to_job):
                try:
                    rows.append(future.result())
                except Exception as e:
                    job = future_to_job[future]
                    logger.error(f"Retrain job {job.checkpoint}/{job.sample_id} failed: {e}")
                    raise
    rows.sort(key=lambda r: (order[r.checkpoint], r.sample_id))
    return CampaignReport(rows=rows, omitted=omitted, checkpoints=[s.name for s in snapshots])
