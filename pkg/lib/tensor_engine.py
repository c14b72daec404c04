"""
Tensor Engine - minimal dense reverse-mode automatic differentiation

This module supplies exactly the forward/backward operations the supernet
needs, on top of numpy float64 arrays in row-major N,C,H,W layout:

- conv2d, avg_pool, batch_norm_lite, dense_classifier, cross_entropy_loss
- elementwise helpers (add, mul, scale, relu, sum, indexing)
- a Tape that replays recorded operations in exact reverse execution order
- momentum and adaptive-moment optimizers

Every operation records a TapeEntry when at least one input tracks
gradients. `backward(loss)` collects the entries reachable from the loss,
orders them by execution sequence and replays them in reverse, accumulating
into the `grad` slot of leaf tensors.

Usage:
    w = Tensor(np.ones((4, 1, 3, 3)), requires_grad=True, name="w")
    b = Tensor(np.zeros(4), requires_grad=True, name="b")
    out = conv2d(Tensor(x), w, b, stride=1, padding=1)
    loss = cross_entropy_loss(dense_classifier(out, fc_w, fc_b), labels)
    backward(loss)
"""

import copy
import itertools
import logging
import threading
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class TensorEngineError(Exception):
    """Base exception for tensor engine errors"""

    pass


class ShapeError(TensorEngineError):
    """Raised when operand extents are incompatible"""

    pass


class GradientError(TensorEngineError):
    """Raised when a backward pass or optimizer step cannot proceed"""

    pass


_sequence = itertools.count()
_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation passes)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """
    Dense float64 array with an attached gradient slot.

    Attributes:
        data: numpy array holding the values (row-major)
        grad: gradient accumulator of the same shape, or None
        requires_grad: whether gradients are tracked through this tensor
        name: optional label used by checkpoints and diagnostics
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_entry")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad: bool = bool(requires_grad)
        self.name = name
        self._entry: Optional["TapeEntry"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(_as_tensor(other), self)

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: Union["Tensor", float]) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    """One executed operation: inputs, output and the local backward rule."""

    seq: int
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """
    Wrap an operation result and record it when any input tracks gradients.

    Args:
        op: Operation name (diagnostics only)
        data: Forward result
        inputs: Operand tensors, in the order `backward` returns their grads
        backward: Maps the output gradient to one gradient (or None) per input

    Returns:
        Result tensor, attached to the tape when gradients are tracked
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._entry = None
    out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._entry = TapeEntry(next(_sequence), op, tuple(inputs), out, backward)
    return out


class Tape:
    """Ordered record of the operations that produced a tensor."""

    def __init__(self, entries: List[TapeEntry]):
        self.entries = entries

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        """Gather every entry reachable from `root`, in execution order."""
        seen: Dict[int, TapeEntry] = {}
        stack = [root]
        while stack:
            tensor = stack.pop()
            entry = tensor._entry
            if entry is None or entry.seq in seen:
                continue
            seen[entry.seq] = entry
            stack.extend(entry.inputs)
        return cls([seen[seq] for seq in sorted(seen)])

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        """Propagate `seed` from `root` through the entries in reverse order."""
        pending: Dict[int, np.ndarray] = {id(root): seed}
        for entry in reversed(self.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                continue
            input_grads = entry.backward(upstream)
            for tensor, grad in zip(entry.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._entry is None:
                    _accumulate(tensor, grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + grad
                else:
                    pending[id(tensor)] = grad


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor) -> None:
    """
    Fill the grad slots of all leaf tensors that `loss` depends on.

    Accumulation is additive: a tensor used several times (or across several
    backward calls) receives the sum of its contributions.

    Raises:
        GradientError: If `loss` is not a single-element tensor
    """
    if loss.size != 1:
        raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._entry is None:
        if loss.requires_grad:
            _accumulate(loss, seed)
        return
    Tape.collect(loss).replay(loss, seed)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise helpers
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def _bw(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record_op("add", data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def _bw(g: np.ndarray):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record_op("mul", data, (a, b), _bw)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant; no gradient flows into `factor`."""
    data = x.data * factor

    def _bw(g: np.ndarray):
        return (g * factor,)

    return record_op("scale", data, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def _bw(g: np.ndarray):
        return (g * mask,)

    return record_op("relu", data, (x,), _bw)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def _bw(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op("sum", data, (x,), _bw)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    for p in parts:
        if isinstance(p, (bool, np.bool_)):
            return False
        if not (isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis):
            return False
    return True


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; advanced indices scatter-add in backward."""
    data = np.array(x.data[index], dtype=np.float64)
    basic = _is_basic_index(index)

    def _bw(g: np.ndarray):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record_op("take", data, (x,), _bw)


def weighted_sum(weights: Sequence[Tensor], terms: Sequence[Tensor]) -> Tensor:
    """Σ w_i · t_i for scalar-tensor weights, evaluated left to right."""
    if not terms:
        raise ShapeError("weighted_sum needs at least one term")
    total = mul(weights[0], terms[0])
    for w, t in zip(weights[1:], terms[1:]):
        total = add(total, mul(w, t))
    return total


# ---------------------------------------------------------------------------
# Network operations
# ---------------------------------------------------------------------------


def output_extent(size: int, k: int, stride: int, padding: int, dim: str) -> int:
    """floor((size + 2·padding − k)/stride) + 1, rejected when < 1."""
    if stride < 1 or padding < 0 or k < 1:
        raise ShapeError(f"{dim}: invalid geometry k={k}, stride={stride}, padding={padding}")
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"{dim}: window {k} does not fit extent {size} with padding {padding}")
    return span // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, out_hw: Tuple[int, int]) -> np.ndarray:
    """Contiguous patch matrix [N·H'·W', C·k·k] of the zero-padded input."""
    h_out, w_out = out_hw
    win = sliding_window_view(_pad(x, padding), (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :h_out, :w_out]
    n, c = x.shape[0], x.shape[1]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k * k)


def _scatter_windows(
    dwin: np.ndarray, padded_shape: Tuple[int, ...], k: int, stride: int, padding: int, hw: Tuple[int, int]
) -> np.ndarray:
    """Inverse of the window view: add per-window gradients (N,C,H',W',k,k) back onto the input."""
    h_out, w_out = dwin.shape[2], dwin.shape[3]
    gxp = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * (h_out - 1) + 1 : stride, j : j + stride * (w_out - 1) + 1 : stride] += dwin[
                :, :, :, :, i, j
            ]
    h, w = hw
    return gxp[:, :, padding : padding + h, padding : padding + w]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation with bias.

    The forward pass is one matrix product over the im2col patches, which are
    kept for the kernel gradient. At stride 1 the input gradient is the
    correlation of the output gradient with the flipped, channel-transposed
    kernel; other strides scatter the per-window gradients.

    Args:
        x: Input [N, C_in, H, W]
        kernel: Weights [C_out, C_in, k, k], k odd
        bias: Bias [C_out]
        stride: Positive step
        padding: Zero padding on each spatial border

    Returns:
        Output [N, C_out, H', W']

    Raises:
        ShapeError: Naming the offending dimension
    """
    if x.data.ndim != 4:
        raise ShapeError(f"input: expected rank 4 (N,C,H,W), got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"kernel: expected rank 4 (C_out,C_in,k,k), got shape {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, k_in, k, k2 = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"C_in: input has {c_in} channels, kernel expects {k_in}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"k: kernel must be square with odd extent, got {k}x{k2}")
    if bias.shape != (c_out,):
        raise ShapeError(f"C_out: bias shape {bias.shape} does not match C_out={c_out}")
    h_out = output_extent(h, k, stride, padding, "H")
    w_out = output_extent(w, k, stride, padding, "W")

    cols = _im2col(x.data, k, stride, padding, (h_out, w_out))
    kmat = kernel.data.reshape(c_out, c_in * k * k)
    out = (cols @ kmat.T).reshape(n, h_out, w_out, c_out)
    data = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def _bw(g: np.ndarray):
        gx = gk = gb = None
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        if kernel.requires_grad:
            gk = (g_mat.T @ cols).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if stride == 1 and padding <= k - 1:
                flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * k * k)
                g_cols = _im2col(g, k, 1, k - 1 - padding, (h, w))
                gx = np.ascontiguousarray((g_cols @ flipped.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2))
            else:
                dwin = (g_mat @ kmat).reshape(n, h_out, w_out, c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
                padded_shape = (n, c_in, h + 2 * padding, w + 2 * padding)
                gx = _scatter_windows(dwin, padded_shape, k, stride, padding, (h, w))
        return gx, gk, gb

    return record_op("conv2d", data, (x, kernel, bias), _bw)


def _box_sum(xp: np.ndarray, k: int, stride: int, out_hw: Tuple[int, int]) -> np.ndarray:
    """Separable k×k window sums of an already padded input."""
    h_out, w_out = out_hw
    rows = xp[:, :, 0 : stride * (h_out - 1) + 1 : stride, :].copy()
    for i in range(1, k):
        rows += xp[:, :, i : i + stride * (h_out - 1) + 1 : stride, :]
    out = rows[:, :, :, 0 : stride * (w_out - 1) + 1 : stride].copy()
    for j in range(1, k):
        out += rows[:, :, :, j : j + stride * (w_out - 1) + 1 : stride]
    return out


def avg_pool(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Mean over k×k windows; padded zeros count towards the k² divisor."""
    if x.data.ndim != 4:
        raise ShapeError(f"input: expected rank 4 (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    h_out = output_extent(h, k, stride, padding, "H")
    w_out = output_extent(w, k, stride, padding, "W")
    area = float(k * k)
    data = _box_sum(_pad(x.data, padding), k, stride, (h_out, w_out)) / area

    def _bw(g: np.ndarray):
        hp, wp = h + 2 * padding, w + 2 * padding
        scaled = g / area
        rows = np.zeros((n, c, h_out, wp))
        for j in range(k):
            rows[:, :, :, j : j + stride * (w_out - 1) + 1 : stride] += scaled
        gxp = np.zeros((n, c, hp, wp))
        for i in range(k):
            gxp[:, :, i : i + stride * (h_out - 1) + 1 : stride, :] += rows
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return record_op("avg_pool", data, (x,), _bw)


def batch_norm_lite(x: Tensor, scale_: Tensor, shift: Tensor, epsilon: float = 1e-5) -> Tensor:
    """
    Per-channel standardization with current-batch statistics, then affine.

    There is no running-average state; evaluation uses the statistics of the
    batch being evaluated.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"input: expected rank 4 (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    if n * h * w < 1:
        raise ShapeError("N·H·W must be at least 1")
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"C: scale/shift shapes {scale_.shape}/{shift.shape} do not match C={c}")
    axes = (0, 2, 3)
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv_std
    gamma = scale_.data[None, :, None, None]
    data = gamma * xhat + shift.data[None, :, None, None]
    count = float(n * h * w)

    def _bw(g: np.ndarray):
        gx = gs = gb = None
        if scale_.requires_grad:
            gs = (g * xhat).sum(axis=axes)
        if shift.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            gxhat = g * gamma
            gx = (inv_std / count) * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        return gx, gs, gb

    return record_op("batch_norm_lite", data, (x, scale_, shift), _bw)


def dense_classifier(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Global average pool over H,W followed by an affine map to class logits."""
    if x.data.ndim != 4:
        raise ShapeError(f"input: expected rank 4 (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    if weight.data.ndim != 2 or weight.shape[1] != c:
        raise ShapeError(f"C: weight shape {weight.shape} does not accept {c} channels")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"num_classes: bias shape {bias.shape} vs weight rows {weight.shape[0]}")
    pooled = x.data.mean(axis=(2, 3))
    data = pooled @ weight.data.T + bias.data

    def _bw(g: np.ndarray):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = g.T @ pooled
        if bias.requires_grad:
            gb = g.sum(axis=0)
        if x.requires_grad:
            gp = g @ weight.data
            gx = np.broadcast_to((gp / float(h * w))[:, :, None, None], x.shape).copy()
        return gx, gw, gb

    return record_op("dense_classifier", data, (x, weight, bias), _bw)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch mean of −log softmax at the true label, max-subtracted."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits: expected rank 2 (N,K), got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"N: {labels.shape[0]} labels for {n} logit rows")
    bad = np.nonzero((labels < 0) | (labels >= k))[0]
    if bad.size:
        raise ShapeError(f"labels: value {labels[bad[0]]} at row {bad[0]} outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(denom)
    rows = np.arange(n)
    data = np.asarray(-log_prob[rows, labels].mean())

    def _bw(g: np.ndarray):
        probs = exp / denom
        probs[rows, labels] -= 1.0
        return (probs * (float(g) / n),)

    return record_op("cross_entropy", data, (logits,), _bw)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """
    Learning rate, step counter and per-parameter auxiliary buffers.

    Buffers are keyed by name ("momentum", "exp_avg", "exp_avg_sq") and hold
    one array per parameter, shape-congruent with it.
    """

    lr: float
    step: int = 0
    buffers: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            lr=self.lr,
            step=self.step,
            buffers={k: [b.copy() for b in v] for k, v in self.buffers.items()},
        )


class Optimizer(ABC):
    """
    Base class for in-place parameter update rules.

    Subclasses implement `_update` for one parameter; `step` validates the
    gradients, applies the rule to each parameter and advances the counter.
    """

    buffer_names: Tuple[str, ...] = ()

    def __init__(self, lr: float):
        self.state = OptimizerState(lr=lr)

    def clone(self) -> "Optimizer":
        """Same rule and hyperparameters with an independent copy of the state."""
        twin = copy.copy(self)
        twin.state = self.state.copy()
        return twin

    def _ensure_buffers(self, params: Sequence[Tensor]) -> None:
        for name in self.buffer_names:
            bufs = self.state.buffers.get(name)
            if bufs is None or len(bufs) != len(params):
                self.state.buffers[name] = [np.zeros_like(p.data) for p in params]

    def step(self, params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]] = None) -> None:
        """
        Apply one update to `params`.

        Args:
            params: Parameters updated in place
            grads: Explicit gradients; defaults to each parameter's grad slot

        Raises:
            GradientError: If a gradient is missing or shape-incongruent
        """
        if grads is None:
            missing = [p.name or f"#{i}" for i, p in enumerate(params) if p.grad is None]
            if missing:
                raise GradientError(f"Missing gradients for parameters: {', '.join(missing)}")
            grads = [p.grad for p in params]  # type: ignore[misc]
        if len(grads) != len(params):
            raise GradientError(f"{len(grads)} gradients for {len(params)} parameters")
        self._ensure_buffers(params)
        self.state.step += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                raise GradientError(f"Missing gradient for parameter {p.name or i}")
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise GradientError(f"Gradient shape {g.shape} != parameter shape {p.shape}")
            self._update(i, p, g)

    @abstractmethod
    def _update(self, index: int, param: Tensor, grad: np.ndarray) -> None:
        raise NotImplementedError("Subclasses must implement _update()")


class MomentumSGD(Optimizer):
    """Momentum descent with L2 weight decay (plain descent when both are 0)."""

    buffer_names = ("momentum",)

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 3e-4):
        super().__init__(lr)
        self.momentum = momentum
        self.weight_decay = weight_decay

    def _update(self, index: int, param: Tensor, grad: np.ndarray) -> None:
        d = grad + self.weight_decay * param.data if self.weight_decay else grad
        if self.momentum:
            buf = self.state.buffers["momentum"]
            buf[index] = d.copy() if self.state.step == 1 else self.momentum * buf[index] + d
            d = buf[index]
        param.data -= self.state.lr * d


class Adam(Optimizer):
    """Adaptive-moment descent with bias correction."""

    buffer_names = ("exp_avg", "exp_avg_sq")

    def __init__(self, lr: float, betas: Tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        super().__init__(lr)
        self.betas = betas
        self.eps = eps

    def _update(self, index: int, param: Tensor, grad: np.ndarray) -> None:
        b1, b2 = self.betas
        m = self.state.buffers["exp_avg"]
        v = self.state.buffers["exp_avg_sq"]
        m[index] = b1 * m[index] + (1.0 - b1) * grad
        v[index] = b2 * v[index] + (1.0 - b2) * grad * grad
        m_hat = m[index] / (1.0 - b1 ** self.state.step)
        v_hat = v[index] / (1.0 - b2 ** self.state.step)
        param.data -= self.state.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(base_lr: float, min_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from base_lr at epoch 0 towards min_lr at total_epochs."""
    if total_epochs <= 0:
        return base_lr
    progress = min(max(epoch, 0), total_epochs) / total_epochs
    return float(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * progress)))
