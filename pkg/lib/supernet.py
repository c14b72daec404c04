"""
Supernet - the searchable network and its parameter accounting.

Layout (row-major N,C,H,W throughout):

    stem (3x3 conv + BN) → stage 0 → reduction → stage 1 → ... → classifier

Each stage holds `cells_per_stage` cells. A cell is a fully connected DAG over
`node_count` nodes whose edges are mixed operations over the five candidates
(Zeroise, Skip Connect, 1x1 Conv, kernel-variable KxK Conv, 3x3 Avg Pooling).
Cells of a stage share one slice of the operation scores α and kernel scores
β; every cell owns its weights. Stage outputs mix the outputs of the first
d cells with depth scores γ once size-variable search is active.

The expected parameter count C is built from the same probabilities as the
forward pass, so it is differentiable with respect to α, β and γ.
"""

import copy
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from lib.simplex_norm import ProbabilityRule
from lib.tensor_engine import (
    Tensor,
    add,
    avg_pool,
    batch_norm_lite,
    conv2d,
    dense_classifier,
    mul,
    relu,
    sum_all,
    weighted_sum,
)


logger = logging.getLogger(__name__)


class SupernetError(Exception):
    """Base exception for supernet errors"""

    pass


class SupernetConfigError(SupernetError):
    """Raised when structural hyperparameters are inconsistent"""

    pass


class ArchitectureMismatchError(SupernetError):
    """Raised when probabilities or choices do not fit the supernet structure"""

    pass


class OperationKind(Enum):
    """The candidate operation set O of every mixed edge."""

    ZEROISE = "none"
    SKIP_CONNECT = "skip_connect"
    CONV_1X1 = "nor_conv_1x1"
    CONV_KXK = "nor_conv_kxk"
    AVG_POOL_3X3 = "avg_pool_3x3"


OPERATIONS: Tuple[OperationKind, ...] = tuple(OperationKind)
KXK_INDEX = OPERATIONS.index(OperationKind.CONV_KXK)


class SupernetConfig(BaseModel):
    """
    Structural hyperparameters of the supernet.

    Attributes:
        in_channels: Input image channels
        num_classes: Classifier outputs
        base_channels: Channels of the first stage (doubled by each reduction)
        num_stages: Number of stages |S|
        cells_per_stage: Cells per stage (the deepest depth candidate)
        node_count: Nodes per cell; the cell has node_count·(node_count−1)/2 edges
        kernel_sizes: Candidate kernels K, ascending odd sizes
        depths: Candidate stage depths D, ascending, each ≤ cells_per_stage
        bn_epsilon: Variance floor of batch_norm_lite
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    in_channels: int = Field(default=1, ge=1)
    num_classes: int = Field(default=2, ge=2)
    base_channels: int = Field(default=16, ge=1)
    num_stages: int = Field(default=3, ge=1)
    cells_per_stage: int = Field(default=3, ge=1)
    node_count: int = Field(default=4, ge=2)
    kernel_sizes: Tuple[int, ...] = (3, 5, 7)
    depths: Tuple[int, ...] = (1, 2, 3)
    bn_epsilon: float = Field(default=1e-5, gt=0)

    @field_validator("kernel_sizes")
    @classmethod
    def _check_kernels(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value:
            raise ValueError("kernel_sizes must not be empty")
        if any(k < 1 or k % 2 == 0 for k in value):
            raise ValueError(f"kernel sizes must be odd and positive, got {value}")
        if list(value) != sorted(set(value)):
            raise ValueError(f"kernel sizes must be strictly ascending, got {value}")
        return value

    @field_validator("depths")
    @classmethod
    def _check_depths(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value:
            raise ValueError("depths must not be empty")
        if list(value) != sorted(set(value)) or value[0] < 1:
            raise ValueError(f"depths must be strictly ascending and >= 1, got {value}")
        return value

    @model_validator(mode="after")
    def _check_depth_fits(self) -> "SupernetConfig":
        if self.depths[-1] > self.cells_per_stage:
            raise ValueError(
                f"max depth {self.depths[-1]} exceeds cells_per_stage={self.cells_per_stage}"
            )
        return self

    @property
    def edge_count(self) -> int:
        return self.node_count * (self.node_count - 1) // 2

    @property
    def k_max(self) -> int:
        return self.kernel_sizes[-1]

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * (2 ** stage)


@dataclass(frozen=True)
class CellTopology:
    """All pairs (i, j), i < j, grouped by destination node."""

    node_count: int
    edges: Tuple[Tuple[int, int], ...]

    @classmethod
    def complete(cls, node_count: int) -> "CellTopology":
        edges = tuple((i, j) for j in range(1, node_count) for i in range(j))
        return cls(node_count, edges)


def conv_param_cost(k: int, c_in: int, c_out: int) -> int:
    """Scalar parameters of a k×k convolution with bias."""
    return k * k * c_in * c_out + c_out


def operation_cost(kind: OperationKind, channels: int, kernel: int) -> int:
    """Parameters of one channel-preserving candidate operation."""
    if kind is OperationKind.CONV_1X1:
        return conv_param_cost(1, channels, channels)
    if kind is OperationKind.CONV_KXK:
        return conv_param_cost(kernel, channels, channels)
    return 0


# ---------------------------------------------------------------------------
# Parameter blocks
# ---------------------------------------------------------------------------


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Block:
    """Base for parameter-holding blocks: named, ordered parameter listing."""

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        raise NotImplementedError("Subclasses must implement named_parameters()")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class BatchNormConstants:
    """Unit scale / zero shift used by non-affine normalization in cells."""

    def __init__(self, channels: int):
        self.scale = Tensor(np.ones(channels))
        self.shift = Tensor(np.zeros(channels))


class ConvBNBlock(Block):
    """[ReLU →] conv2d → batch_norm_lite, with learnable affine terms."""

    def __init__(
        self,
        name: str,
        c_in: int,
        c_out: int,
        k: int,
        stride: int,
        rng: np.random.Generator,
        pre_relu: bool = True,
        epsilon: float = 1e-5,
    ):
        self.name = name
        self.stride = stride
        self.padding = k // 2
        self.pre_relu = pre_relu
        self.epsilon = epsilon
        self.weight = _param(_he_normal(rng, (c_out, c_in, k, k), c_in * k * k), f"{name}.weight")
        self.bias = _param(np.zeros(c_out), f"{name}.bias")
        self.bn_scale = _param(np.ones(c_out), f"{name}.bn_scale")
        self.bn_shift = _param(np.zeros(c_out), f"{name}.bn_shift")

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for p in (self.weight, self.bias, self.bn_scale, self.bn_shift):
            yield p.name, p  # type: ignore[misc]

    def forward(self, x: Tensor) -> Tensor:
        if self.pre_relu:
            x = relu(x)
        out = conv2d(x, self.weight, self.bias, self.stride, self.padding)
        return batch_norm_lite(out, self.bn_scale, self.bn_shift, self.epsilon)


class ReductionBlock(Block):
    """Fixed residual down-sampling: halves H, W and doubles channels."""

    def __init__(self, name: str, c_in: int, rng: np.random.Generator, epsilon: float = 1e-5):
        c_out = 2 * c_in
        self.name = name
        self.conv_a = ConvBNBlock(f"{name}.conv_a", c_in, c_out, 3, 2, rng, epsilon=epsilon)
        self.conv_b = ConvBNBlock(f"{name}.conv_b", c_out, c_out, 3, 1, rng, epsilon=epsilon)
        self.shortcut_weight = _param(_he_normal(rng, (c_out, c_in, 1, 1), c_in), f"{name}.shortcut.weight")
        self.shortcut_bias = _param(np.zeros(c_out), f"{name}.shortcut.bias")

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.conv_a.named_parameters()
        yield from self.conv_b.named_parameters()
        yield self.shortcut_weight.name, self.shortcut_weight  # type: ignore[misc]
        yield self.shortcut_bias.name, self.shortcut_bias  # type: ignore[misc]

    def forward(self, x: Tensor) -> Tensor:
        residual = conv2d(x, self.shortcut_weight, self.shortcut_bias, stride=2, padding=0)
        return add(self.conv_b.forward(self.conv_a.forward(x)), residual)


class ClassifierHead(Block):
    """ReLU → global average pool → affine map to logits."""

    def __init__(self, name: str, channels: int, num_classes: int, rng: np.random.Generator):
        self.name = name
        self.weight = _param(_he_normal(rng, (num_classes, channels), channels), f"{name}.weight")
        self.bias = _param(np.zeros(num_classes), f"{name}.bias")

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield self.weight.name, self.weight  # type: ignore[misc]
        yield self.bias.name, self.bias  # type: ignore[misc]

    def forward(self, x: Tensor) -> Tensor:
        return dense_classifier(relu(x), self.weight, self.bias)


@dataclass
class FixedBlocks:
    """The non-searchable parts shared by supernet and discrete models."""

    stem: ConvBNBlock
    reductions: List[ReductionBlock]
    classifier: ClassifierHead

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.stem.named_parameters()
        for block in self.reductions:
            yield from block.named_parameters()
        yield from self.classifier.named_parameters()


def build_fixed_blocks(config: SupernetConfig, rng: np.random.Generator) -> FixedBlocks:
    eps = config.bn_epsilon
    stem = ConvBNBlock("stem", config.in_channels, config.base_channels, 3, 1, rng, pre_relu=False, epsilon=eps)
    reductions = [
        ReductionBlock(f"reductions.{s}", config.stage_channels(s), rng, epsilon=eps)
        for s in range(config.num_stages - 1)
    ]
    last = config.stage_channels(config.num_stages - 1)
    classifier = ClassifierHead("classifier", last, config.num_classes, rng)
    return FixedBlocks(stem, reductions, classifier)


def fixed_param_count(config: SupernetConfig) -> int:
    """Parameters of stem, reductions and classifier (conv, bias and BN affine)."""
    c0 = config.base_channels
    total = conv_param_cost(3, config.in_channels, c0) + 2 * c0
    for s in range(config.num_stages - 1):
        c, c2 = config.stage_channels(s), 2 * config.stage_channels(s)
        total += conv_param_cost(3, c, c2) + 2 * c2
        total += conv_param_cost(3, c2, c2) + 2 * c2
        total += conv_param_cost(1, c, c2)
    last = config.stage_channels(config.num_stages - 1)
    total += last * config.num_classes + config.num_classes
    return total


class KernelBank(Block):
    """
    One shared k_max×k_max weight bank plus one bias per candidate kernel.

    A k×k kernel is the centered crop of the bank.
    """

    def __init__(self, name: str, channels: int, kernel_sizes: Sequence[int], rng: np.random.Generator):
        self.name = name
        self.kernel_sizes = tuple(kernel_sizes)
        k_max = self.kernel_sizes[-1]
        self.weights = _param(
            _he_normal(rng, (channels, channels, k_max, k_max), channels * k_max * k_max), f"{name}.weight"
        )
        self.biases: Dict[int, Tensor] = {
            k: _param(np.zeros(channels), f"{name}.bias_k{k}") for k in self.kernel_sizes
        }
        self._masks: Dict[int, Tensor] = {}

    @property
    def k_max(self) -> int:
        return self.kernel_sizes[-1]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield self.weights.name, self.weights  # type: ignore[misc]
        for k in self.kernel_sizes:
            yield self.biases[k].name, self.biases[k]  # type: ignore[misc]

    def crop(self, k: int) -> Tensor:
        if k == self.k_max:
            return self.weights
        offset = (self.k_max - k) // 2
        return self.weights[:, :, offset : offset + k, offset : offset + k]

    def mask(self, k: int) -> Tensor:
        """Constant k_max×k_max indicator of the centered k×k crop."""
        cached = self._masks.get(k)
        if cached is None:
            window = np.zeros((self.k_max, self.k_max))
            offset = (self.k_max - k) // 2
            window[offset : offset + k, offset : offset + k] = 1.0
            cached = self._masks[k] = Tensor(window)
        return cached


def kernel_variable_conv_forward(
    x: Tensor, bank: KernelBank, kernel_probs: Optional[Tensor], active: bool
) -> Tensor:
    """
    Mixed convolution Σ_k p_k·conv_k(x) over centered crops of the bank.

    With "same" padding the mixture is a single convolution whose kernel is
    the bank masked by Σ_k p_k·1[centered k×k] and whose bias is Σ_k p_k·b_k.
    When inactive (before the size-variable threshold) only the largest
    kernel runs.

    Args:
        x: Input [N, C, H, W]
        bank: Shared kernel bank of the edge
        kernel_probs: Probabilities over the bank's kernel sizes
        active: Whether kernel-variable search is switched on
    """
    k_max = bank.k_max
    if not active or kernel_probs is None:
        return conv2d(x, bank.weights, bank.biases[k_max], 1, k_max // 2)
    live = [(i, k) for i, k in enumerate(bank.kernel_sizes) if kernel_probs.data[i] != 0.0]
    probs = [kernel_probs[i] for i, _ in live]
    window = weighted_sum(probs, [bank.mask(k) for _, k in live])
    bias = weighted_sum(probs, [bank.biases[k] for _, k in live])
    return conv2d(x, mul(bank.weights, window), bias, 1, k_max // 2)


class EdgeWeights(Block):
    """Weights of the parametric candidates on one edge of one cell."""

    def __init__(self, name: str, channels: int, config: SupernetConfig, rng: np.random.Generator):
        self.name = name
        self.epsilon = config.bn_epsilon
        self.bn = BatchNormConstants(channels)
        self.conv1x1_weight = _param(_he_normal(rng, (channels, channels, 1, 1), channels), f"{name}.conv1x1.weight")
        self.conv1x1_bias = _param(np.zeros(channels), f"{name}.conv1x1.bias")
        self.bank = KernelBank(f"{name}.bank", channels, config.kernel_sizes, rng)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield self.conv1x1_weight.name, self.conv1x1_weight  # type: ignore[misc]
        yield self.conv1x1_bias.name, self.conv1x1_bias  # type: ignore[misc]
        yield from self.bank.named_parameters()

    def _normalize(self, x: Tensor) -> Tensor:
        return batch_norm_lite(x, self.bn.scale, self.bn.shift, self.epsilon)

    def apply(
        self,
        kind: OperationKind,
        x: Tensor,
        kernel_probs: Optional[Tensor],
        active: bool,
        activated: Optional[Tensor] = None,
    ) -> Optional[Tensor]:
        """
        Run one candidate; None stands for the all-zero output of Zeroise.

        `activated` is relu(x) when the caller already computed it.
        """
        if kind is OperationKind.ZEROISE:
            return None
        if kind is OperationKind.SKIP_CONNECT:
            return x
        if kind is OperationKind.AVG_POOL_3X3:
            return avg_pool(x, 3, 1, 1)
        if activated is None:
            activated = relu(x)
        if kind is OperationKind.CONV_1X1:
            return self._normalize(conv2d(activated, self.conv1x1_weight, self.conv1x1_bias, 1, 0))
        return self._normalize(kernel_variable_conv_forward(activated, self.bank, kernel_probs, active))


def _zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _mixed_edge(
    x: Tensor, edge: EdgeWeights, edge_probs: Tensor, kernel_probs: Optional[Tensor], active: bool
) -> Optional[Tensor]:
    weights, terms = [], []
    activated: Optional[Tensor] = None
    for o, kind in enumerate(OPERATIONS):
        if edge_probs.data[o] == 0.0 or kind is OperationKind.ZEROISE:
            continue
        if kind in (OperationKind.CONV_1X1, OperationKind.CONV_KXK) and activated is None:
            activated = relu(x)
        out = edge.apply(kind, x, kernel_probs, active, activated)
        if out is not None:
            weights.append(edge_probs[o])
            terms.append(out)
    return weighted_sum(weights, terms) if terms else None


def mixed_edge_forward(
    x: Tensor, edge: EdgeWeights, edge_probs: Tensor, kernel_probs: Optional[Tensor] = None, active: bool = False
) -> Tensor:
    """
    Probability-weighted sum of the five candidates' outputs on one edge.

    Candidates with probability exactly 0 are not evaluated and receive no
    gradient.
    """
    out = _mixed_edge(x, edge, edge_probs, kernel_probs, active)
    return out if out is not None else _zeros_like(x)


class Cell(Block):
    """Fully connected DAG; node j sums the mixed edges from every node i < j."""

    def __init__(self, name: str, channels: int, config: SupernetConfig, rng: np.random.Generator):
        self.name = name
        self.topology = CellTopology.complete(config.node_count)
        self.edges = [
            EdgeWeights(f"{name}.edges.{e}", channels, config, rng) for e in range(len(self.topology.edges))
        ]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for edge in self.edges:
            yield from edge.named_parameters()

    def forward(self, x: Tensor, alpha: Tensor, beta: Optional[Tensor], active: bool) -> Tensor:
        """
        Args:
            alpha: Operation probabilities [N_edges, |O|] of this stage
            beta: Kernel probabilities [N_edges, |K|] or None
        """
        nodes: List[Optional[Tensor]] = [x]
        for j in range(1, self.topology.node_count):
            total: Optional[Tensor] = None
            for e, (src, dst) in enumerate(self.topology.edges):
                if dst != j or nodes[src] is None:
                    continue
                kernel_probs = beta[e] if beta is not None else None
                out = _mixed_edge(nodes[src], self.edges[e], alpha[e], kernel_probs, active)  # type: ignore[arg-type]
                if out is not None:
                    total = out if total is None else add(total, out)
            nodes.append(total)
        return nodes[-1] if nodes[-1] is not None else _zeros_like(x)


class Stage(Block):
    """Sequence of cells sharing one set of architecture scores."""

    def __init__(self, name: str, channels: int, config: SupernetConfig, rng: np.random.Generator):
        self.name = name
        self.channels = channels
        self.depths = config.depths
        self.cells = [Cell(f"{name}.cells.{c}", channels, config, rng) for c in range(config.cells_per_stage)]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for cell in self.cells:
            yield from cell.named_parameters()


def stage_forward_depth_mixed(
    x: Tensor,
    stage: Stage,
    alpha: Tensor,
    beta: Optional[Tensor],
    gamma: Optional[Tensor],
    active: bool,
) -> Tensor:
    """
    Run the cells of a stage in sequence and mix the candidate-depth outputs.

    When inactive the stage output is the deepest cell's output. When active
    it is Σ_d p_d·output_d; cells deeper than the largest depth with non-zero
    probability are not run.
    """
    if not active or gamma is None:
        for cell in stage.cells:
            x = cell.forward(x, alpha, None, False)
        return x
    positive = [i for i, _ in enumerate(stage.depths) if gamma.data[i] != 0.0]
    deepest = stage.depths[positive[-1]]
    outputs = []
    for cell in stage.cells[:deepest]:
        x = cell.forward(x, alpha, beta, True)
        outputs.append(x)
    return weighted_sum([gamma[i] for i in positive], [outputs[stage.depths[i] - 1] for i in positive])


@dataclass
class ArchParams:
    """Architecture scores: α [|S|, N, |O|], β [|S|, N, |K|], γ [|S|, |D|]."""

    alpha: Tensor
    beta: Tensor
    gamma: Tensor

    @classmethod
    def zeros(cls, config: SupernetConfig) -> "ArchParams":
        s, n = config.num_stages, config.edge_count
        return cls(
            alpha=_param(np.zeros((s, n, len(OPERATIONS))), "arch.alpha"),
            beta=_param(np.zeros((s, n, len(config.kernel_sizes))), "arch.beta"),
            gamma=_param(np.zeros((s, len(config.depths))), "arch.gamma"),
        )

    def tensors(self) -> List[Tensor]:
        return [self.alpha, self.beta, self.gamma]


@dataclass
class ArchProbabilities:
    """
    Normalized architecture probabilities for one forward pass.

    beta and gamma are None while size-variable search is inactive.
    """

    alpha: Tensor
    beta: Optional[Tensor]
    gamma: Optional[Tensor]

    @property
    def size_variable(self) -> bool:
        return self.beta is not None and self.gamma is not None

    @classmethod
    def from_arrays(
        cls, alpha: np.ndarray, beta: Optional[np.ndarray] = None, gamma: Optional[np.ndarray] = None
    ) -> "ArchProbabilities":
        return cls(
            alpha=Tensor(alpha),
            beta=Tensor(beta) if beta is not None else None,
            gamma=Tensor(gamma) if gamma is not None else None,
        )

    def arrays(self) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
        return (
            self.alpha.data.copy(),
            self.beta.data.copy() if self.beta is not None else None,
            self.gamma.data.copy() if self.gamma is not None else None,
        )


@dataclass(frozen=True)
class ParamCostTable:
    """
    Parameter costs in scalar parameters.

    Attributes:
        op_costs: [|S|, N, |O|] cost of each candidate per edge (KxK at k_max)
        kernel_costs: [|S|, |K|] cost of the KxK candidate per kernel size
        depths: Candidate depths D (cost c_d of a stage = d cells)
        cells_per_stage: Cells run while size-variable search is inactive
        fixed: Stem + reductions + classifier
    """

    op_costs: np.ndarray
    kernel_costs: np.ndarray
    depths: Tuple[int, ...]
    cells_per_stage: int
    fixed: int

    @classmethod
    def from_config(cls, config: SupernetConfig) -> "ParamCostTable":
        s, n = config.num_stages, config.edge_count
        op_costs = np.zeros((s, n, len(OPERATIONS)))
        kernel_costs = np.zeros((s, len(config.kernel_sizes)))
        for stage in range(s):
            c = config.stage_channels(stage)
            for o, kind in enumerate(OPERATIONS):
                op_costs[stage, :, o] = operation_cost(kind, c, config.k_max)
            for i, k in enumerate(config.kernel_sizes):
                kernel_costs[stage, i] = conv_param_cost(k, c, c)
        return cls(op_costs, kernel_costs, tuple(config.depths), config.cells_per_stage, fixed_param_count(config))


def expected_param_count_tensor(costs: ParamCostTable, probs: ArchProbabilities) -> Tensor:
    """
    Differentiable expected parameter count C.

    Per edge: Σ_o p_o·c_o with the KxK cost Σ_k p_k·c_k when size-variable.
    Per stage: Σ_d p_d·(d · cell cost), or all cells when inactive.
    """
    num_stages = costs.op_costs.shape[0]
    if probs.alpha.shape != costs.op_costs.shape:
        raise ArchitectureMismatchError(f"alpha probabilities {probs.alpha.shape} vs costs {costs.op_costs.shape}")
    active = probs.size_variable
    static = costs.op_costs.copy()
    if active:
        static[:, :, KXK_INDEX] = 0.0
    total: Tensor = Tensor(float(costs.fixed))
    for s in range(num_stages):
        alpha_s = probs.alpha[s]
        cell_cost = sum_all(mul(alpha_s, Tensor(static[s])))
        if active:
            kxk = mul(alpha_s[:, KXK_INDEX : KXK_INDEX + 1], probs.beta[s])  # type: ignore[index]
            cell_cost = add(cell_cost, sum_all(mul(kxk, Tensor(costs.kernel_costs[s][None, :]))))
            depth_values = Tensor(np.array(costs.depths, dtype=np.float64))
            depth_weight = sum_all(mul(probs.gamma[s], depth_values))  # type: ignore[index]
            stage_cost = mul(depth_weight, cell_cost)
        else:
            stage_cost = mul(Tensor(float(costs.cells_per_stage)), cell_cost)
        total = add(total, stage_cost)
    return total


class Supernet:
    """
    The full searchable network with weights w and architecture scores α, β, γ.

    Usage:
        net = build_supernet(SupernetConfig(num_stages=2, base_channels=8), seed=0)
        probs = net.probabilities(ProbabilityRule(), epoch=0, size_variable=False)
        logits = net.forward(batch, probs)
    """

    def __init__(self, config: SupernetConfig, rng: np.random.Generator):
        self.config = config
        fixed = build_fixed_blocks(config, rng)
        self.stem = fixed.stem
        self.reductions = fixed.reductions
        self.classifier = fixed.classifier
        self.stages = [
            Stage(f"stages.{s}", config.stage_channels(s), config, rng) for s in range(config.num_stages)
        ]
        self.arch = ArchParams.zeros(config)
        self.costs = ParamCostTable.from_config(config)

    @property
    def fixed_blocks(self) -> FixedBlocks:
        return FixedBlocks(self.stem, self.reductions, self.classifier)

    def named_weights(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.stem.named_parameters()
        for s, stage in enumerate(self.stages):
            yield from stage.named_parameters()
            if s < len(self.reductions):
                yield from self.reductions[s].named_parameters()
        yield from self.classifier.named_parameters()

    def weight_parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_weights()]

    def arch_parameters(self) -> List[Tensor]:
        return self.arch.tensors()

    def named_tensors(self) -> Dict[str, Tensor]:
        """Every parameter tensor (weights, then α, β, γ) by name, in a fixed order."""
        named = dict(self.named_weights())
        for t in self.arch.tensors():
            named[t.name] = t  # type: ignore[index]
        return named

    def load_named_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        named = self.named_tensors()
        missing = sorted(set(named) - set(arrays))
        if missing:
            raise ArchitectureMismatchError(f"Missing tensors: {', '.join(missing[:5])}")
        for name, tensor in named.items():
            value = arrays[name]
            if value.shape != tensor.shape:
                raise ArchitectureMismatchError(f"{name}: stored shape {value.shape} vs {tensor.shape}")
            tensor.data = np.array(value, dtype=np.float64)
            tensor.grad = None

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def copy(self) -> "Supernet":
        self.zero_grad()
        return copy.deepcopy(self)

    def probabilities(self, rule: ProbabilityRule, epoch: int, size_variable: bool) -> ArchProbabilities:
        """Normalize α (and β, γ when size-variable) for the given epoch."""
        alpha = rule.apply(self.arch.alpha, epoch)
        if not size_variable:
            return ArchProbabilities(alpha, None, None)
        return ArchProbabilities(alpha, rule.apply(self.arch.beta, epoch), rule.apply(self.arch.gamma, epoch))

    def forward(self, x: Union[np.ndarray, Tensor], probs: ArchProbabilities) -> Tensor:
        """Logits [N, num_classes] for a float batch [N, C, H, W]."""
        expected = (self.config.num_stages, self.config.edge_count, len(OPERATIONS))
        if probs.alpha.shape != expected:
            raise ArchitectureMismatchError(f"alpha probabilities {probs.alpha.shape}, expected {expected}")
        out = self.stem.forward(x if isinstance(x, Tensor) else Tensor(x))
        active = probs.size_variable
        for s, stage in enumerate(self.stages):
            out = stage_forward_depth_mixed(
                out,
                stage,
                probs.alpha[s],
                probs.beta[s] if active else None,  # type: ignore[index]
                probs.gamma[s] if active else None,  # type: ignore[index]
                active,
            )
            if s < len(self.reductions):
                out = self.reductions[s].forward(out)
        return self.classifier.forward(out)

    def expected_param_count(self, probs: ArchProbabilities) -> Tensor:
        return expected_param_count_tensor(self.costs, probs)


def build_supernet(config: Union[SupernetConfig, Dict[str, object]], seed: int = 0) -> Supernet:
    """
    Allocate and initialize every parameter group.

    Conv weights are fan-in scaled normal draws, biases zero, BN affine
    terms at identity, and α, β, γ zero (uniform probabilities).

    Raises:
        SupernetConfigError: If a raw config mapping fails validation
    """
    if not isinstance(config, SupernetConfig):
        try:
            config = SupernetConfig.model_validate(config)
        except ValidationError as e:
            raise SupernetConfigError(f"Invalid supernet config: {e}") from e
    net = Supernet(config, np.random.default_rng(seed))
    logger.debug(
        f"Built supernet: {config.num_stages} stages x {config.cells_per_stage} cells, "
        f"{config.edge_count} edges/cell, {sum(p.size for p in net.weight_parameters())} weights"
    )
    return net


def expected_param_count(net: Supernet, rule: ProbabilityRule, epoch: int, size_variable: bool) -> float:
    """Expected parameter count C of the supernet at `epoch`."""
    return expected_param_count_tensor(net.costs, net.probabilities(rule, epoch, size_variable)).item()
