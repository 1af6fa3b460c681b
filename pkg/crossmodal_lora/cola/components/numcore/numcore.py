"""Dense tensors with define-by-run reverse-mode differentiation, plus a finite-difference oracle"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import erf

from ...utils.definitions import ActivationKind
from .. import app_logger
from ..custom_exceptions import ConfigurationError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64
LN_EPS = 1e-5

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_grad_state = threading.local()


def grad_enabled() -> bool:
    """Whether operations currently record graph edges on this thread"""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread for the duration of the block"""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """Dense real-valued N-dimensional array participating in a differentiation graph"""

    def __init__(
        self,
        data: np.ndarray | float | Sequence,
        requires_grad: bool = False,
        dtype: np.dtype | type | None = None,
        name: str | None = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(dtype or DEFAULT_DTYPE)

        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"

        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Tensor | float) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Tensor | float) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Tensor | float) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Tensor | float) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    """Creates a trainable leaf tensor"""
    return Tensor(data, requires_grad=True, dtype=np.asarray(data).dtype, name=name)


def as_tensor(value: Tensor | np.ndarray | float, like: Tensor | None = None) -> Tensor:
    """Wraps a constant as a non-trainable tensor, matching the dtype of `like` when given"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _record(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sums `grad` down to `shape`, undoing numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


# Arithmetic


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward_fn, "mul")


def div(a: Tensor | float, b: Tensor | float) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "div")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(a.data / b.data, (a, b), backward_fn, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch axes

    Args:
        a (Tensor): Left operand of shape [..., m, k]
        b (Tensor): Right operand of shape [..., k, n]

    Returns:
        Tensor: The product of shape [..., m, n]
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} and {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch axes disagree: {a.shape} and {b.shape}") from e

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _record(a.data @ b.data, (a, b), backward_fn, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swaps the last two axes"""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.swapaxes(g, -1, -2),)

    return _record(np.swapaxes(x.data, -1, -2), (x,), backward_fn, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from e

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return _record(data, (x,), backward_fn, "reshape")


def _expand_reduced(
    g: np.ndarray, shape: tuple[int, ...], axis: int | tuple[int, ...] | None, keepdims: bool
) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(sorted(a % len(shape) for a in axes))
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tensor_sum(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward_fn, "sum")


def tensor_mean(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return _record(
        np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward_fn, "mean"
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(
            f"concat shapes disagree: {[t.shape for t in tensors]}"
        ) from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return _record(data, tuple(tensors), backward_fn, "concat")


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Selects one slice along `axis`, dropping that axis"""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"take from an empty axis of shape {x.shape}")
    axis = axis % x.ndim

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        grad[tuple(slicer)] = g
        return (grad,)

    return _record(np.take(x.data, index, axis=axis), (x,), backward_fn, "take")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]` with scatter-add gradients"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"token ids out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _record(table.data[ids], (table,), backward_fn, "embedding")


# Neural-network primitives


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by subtracting the row max"""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {x.shape}")

    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward_fn, "softmax_rows")


def layer_norm(
    x: Tensor,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = LN_EPS,
) -> Tensor:
    """Normalises the last axis to zero mean and unit variance, then applies gain and bias

    Args:
        x (Tensor): Input of shape [..., d]
        gain (Tensor | None): Per-feature scale of shape [d]; omitted means 1
        bias (Tensor | None): Per-feature shift of shape [d]; omitted means 0
        eps (float): Variance floor

    Returns:
        Tensor: The normalised tensor, same shape as `x`
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"layer_norm needs a non-empty feature axis, got {x.shape}")
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm affine shape {p.shape} does not match d={d}")

    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centred * inv_std

    out = x_hat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward_fn(g: np.ndarray) -> list[np.ndarray]:
        d_hat = g * gain.data if gain is not None else g
        grad_x = (
            inv_std
            / d
            * (
                d * d_hat
                - d_hat.sum(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
            )
        )
        grads = [grad_x]
        if gain is not None:
            grads.append(_unbroadcast(g * x_hat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _record(out, parents, backward_fn, "layer_norm")


def activation(x: Tensor, kind: ActivationKind | str) -> Tensor:
    """Element-wise GELU (exact, erf-based) or ReLU"""
    try:
        kind = ActivationKind(kind)
    except ValueError as e:
        app_logger.error("Unknown activation kind: %s", kind)
        raise ConfigurationError(f"Unknown activation kind: {kind}") from e

    if kind is ActivationKind.RELU:
        mask = (x.data > 0).astype(x.dtype)

        def relu_backward(g: np.ndarray) -> tuple[np.ndarray]:
            return (g * mask,)

        return _record(x.data * mask, (x,), relu_backward, "relu")

    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)

    def gelu_backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (cdf + x.data * pdf),)

    return _record((x.data * cdf).astype(x.dtype), (x,), gelu_backward, "gelu")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under row-wise softmax of `logits`"""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy needs logits [B, C] and labels [B], got {logits.shape} and {labels.shape}"
        )
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn, "cross_entropy")


# Graph and backward


@dataclass
class Graph:
    """Recorded operations reachable from one output, in topological order"""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        """Collects every tensor `output` depends on, inputs before the operations using them

        Args:
            output (Tensor): The root of the graph, usually a loss

        Returns:
            Graph: The graph in topological order
        """
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        return cls(nodes=order)

    def leaves(self) -> list[Tensor]:
        return [node for node in self.nodes if node.is_leaf]

    def trainable_leaves(self) -> list[Tensor]:
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]

    def first_non_finite(self) -> Tensor | None:
        """Returns the earliest tensor in graph order that holds NaN or Inf"""
        for node in self.nodes:
            if not np.all(np.isfinite(node.data)):
                return node
        return None


def _describe(node: Tensor) -> str:
    return node.name or f"{node.op}{list(node.shape)}"


def backward(loss: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagates d(loss)/d(leaf) into the `.grad` of every trainable leaf

    Gradients accumulate into existing `.grad` buffers; leaves created with
    `requires_grad=False` (frozen weights) never receive one.

    Args:
        loss (Tensor): A scalar output
        graph (Graph | None): The graph of `loss`; built on demand when omitted

    Returns:
        dict[Tensor, np.ndarray]: The gradient contributed to each trainable leaf
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_output(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    contributed: dict[Tensor, np.ndarray] = {}

    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue

        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            contributed[node] = g
            continue

        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = np.asarray(parent_grad, dtype=parent.dtype)

    return contributed


def check_finite(output: Tensor) -> None:
    """Raises NumericError naming the first non-finite tensor behind `output`"""
    if np.all(np.isfinite(output.data)):
        return
    culprit = Graph.from_output(output).first_non_finite() or output
    name = _describe(culprit)
    app_logger.error("Non-finite values first appear in %s", name)
    raise NumericError(f"Non-finite values first appear in {name}", node=name)


def finite_diff_grad(
    f: Callable[[Tensor], Tensor | float],
    theta: Tensor,
    h: float = 1e-6,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> Tensor:
    """Central-difference estimate of df/dtheta, one coordinate at a time

    `f` is evaluated under `no_grad()`; no backward pass is involved.

    Args:
        f (Callable[[Tensor], Tensor | float]): Scalar function of `theta`
        theta (Tensor): The point to differentiate at; perturbed in place and restored
        h (float): Step size
        indices (Sequence[tuple[int, ...]] | None): Coordinates to estimate; all when
            omitted, the rest left at zero

    Returns:
        Tensor: The gradient estimate, same shape as `theta`
    """
    if h <= 0:
        raise ConfigurationError(f"Finite-difference step must be positive, got {h}")

    def evaluate() -> float:
        value = f(theta)
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            app_logger.error("Non-finite function value during finite differences")
            raise NumericError("Non-finite function value during finite differences")
        return value

    estimate = np.zeros(theta.shape, dtype=np.float64)
    with no_grad():
        for index in indices if indices is not None else np.ndindex(*theta.shape):
            original = theta.data[index].copy()
            try:
                theta.data[index] = original + h
                upper = evaluate()
                theta.data[index] = original - h
                lower = evaluate()
            finally:
                theta.data[index] = original
            estimate[index] = (upper - lower) / (2.0 * h)

    return Tensor(estimate)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute disagreement, relative to the larger of the two gradients' scale"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.zero_grad()
