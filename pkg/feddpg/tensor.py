"""
Dense float64 tensors with reverse-mode gradients

Every differentiable operation returns a new Tensor that keeps references to
its parents and a backward function mapping the output gradient to one
gradient per parent. ``backward`` walks the recorded computation in reverse
topological order and accumulates into ``grad`` of leaf tensors created with
``requires_grad=True``.
"""

import contextlib
import math
from contextvars import ContextVar
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from feddpg.errors import (
    ContractError,
    DimensionError,
    InputError,
    LabelError,
    NumericError,
)

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

LAYER_NORM_EPS = 1e-5

_grad_enabled: ContextVar[bool] = ContextVar("feddpg_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for operations executed inside the block"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """
    Row-major float64 array that may take part in a recorded computation

    Leaf tensors are created by users (parameters, inputs). Tensors produced by
    operations are interior nodes: they carry ``requires_grad=True`` when any
    parent does, but only leaves receive a ``grad`` during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _result(
        cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        if _grad_enabled.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        return sub(self, _as_tensor(other))

    def __rsub__(self, other: Union["Tensor", float]) -> "Tensor":
        return sub(_as_tensor(other), self)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{flag})"


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along the axes broadcasting expanded"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast")


# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * (1.0 - out * out),)

    return Tensor._result(out, (a,), backward, "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor._result(out, (a,), backward, "gelu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * mask,)

    return Tensor._result(a.data * mask, (a,), backward, "relu")


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "gelu": gelu,
    "relu": relu,
}


# Linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast

    Gradient: dA = dC·Bᵀ, dB = Aᵀ·dC (summed over broadcast axes).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape; never reorders data"""
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(a.shape),)

    return Tensor._result(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return Tensor._result(np.transpose(a.data, axes), (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [list(t.shape) for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), backward, "concat")


def slice_axis(a: Tensor, stop: int, axis: int = 0) -> Tensor:
    """Keep the first ``stop`` entries along ``axis``"""
    index = [slice(None)] * a.ndim
    index[axis] = slice(0, stop)
    index = tuple(index)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        grad[index] = g
        return (grad,)

    return Tensor._result(a.data[index], (a,), backward, "slice")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` may have any integer shape"""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return Tensor._result(table.data[ids], (table,), backward, "gather_rows")


# Reductions


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum()), (a,), backward, "sum")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """
    Mean over the second-to-last axis of ``x`` counting only rows where ``mask`` is true

    x: [..., n, d], mask: [..., n] -> [..., d]. Kept rows are summed in sorted
    order per column, so the result is bit-identical under any row permutation.
    """
    keep = np.asarray(mask, dtype=np.float64)
    if keep.shape != x.shape[:-1]:
        raise DimensionError(f"masked_mean: mask {list(keep.shape)} does not match {list(x.shape)}")
    counts = keep.sum(axis=-1)
    if np.any(counts == 0):
        raise InputError("cannot average a sequence with no unmasked positions")
    kept = np.where(keep[..., None] > 0, x.data, 0.0)
    out = np.sort(kept, axis=-2).sum(axis=-2) / counts[..., None]
    weights = keep / counts[..., None]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (weights[..., None] * g[..., None, :],)

    return Tensor._result(out, (x,), backward, "masked_mean")


# Normalization and losses


def softmax_rows(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax along the last axis with max-subtraction

    ``mask`` (broadcastable to ``a``) marks entries that take part; masked
    entries get probability zero.
    """
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows received non-finite input")
    if mask is None:
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if not np.all(keep.any(axis=-1)):
            raise ContractError("softmax_rows: a row has every entry masked")
        row_max = np.where(keep, a.data, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, a.data - row_max, 0.0)), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (a,), backward, "softmax_rows")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain and bias"""
    n = a.shape[-1]
    if n < 2:
        raise ContractError(f"layer_norm needs at least 2 features, got {n}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(
            f"layer_norm: gain {list(gain.shape)} / bias {list(bias.shape)} do not match {n}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
        g_xhat = g * gain.data
        ga = (inv_std / n) * (
            n * g_xhat
            - g_xhat.sum(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).sum(axis=-1, keepdims=True)
        )
        if not gain.requires_grad and not bias.requires_grad:
            return ga, None, None
        g_gain = (g * xhat).reshape(-1, n).sum(axis=0)
        g_bias = g.reshape(-1, n).sum(axis=0)
        return ga, g_gain, g_bias

    return Tensor._result(out, (a, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    Summed negative log-likelihood: Σ_i −log softmax(logits_i)[label_i]

    logits: [K] with an int label, or [B, K] with B labels. Returns a scalar.
    """
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {list(logits.shape)} do not match labels {list(y.shape)}"
        )
    num_classes = z.shape[1]
    if np.any(y < 0) or np.any(y >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes}): {y.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float((log_norm - shifted[rows, y]).sum())

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, y] -= 1.0
        grad = g * probs
        return (grad[0] if single else grad,)

    return Tensor._result(np.asarray(loss), (logits,), backward, "cross_entropy")


# Reverse traversal


class ComputationRecord:
    """
    Operations reachable from an output, in topological order (inputs first)

    Built by ``trace``; ``backward`` visits ``reversed(nodes)`` so every
    operation is processed exactly once.
    """

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
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
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def clear(self) -> None:
        """Drop gradient state and graph links; parameter values are untouched"""
        for node in self.nodes:
            node.grad = None
            if not node.is_leaf:
                node._parents = ()
                node._backward = None

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)


def backward(loss: Tensor) -> ComputationRecord:
    """
    Accumulate ∂loss/∂leaf into ``grad`` of every trainable leaf upstream of ``loss``

    Gradients add to existing ``grad`` values until zeroed explicitly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    record = ComputationRecord.trace(loss)
    if not loss.requires_grad:
        return record

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    return record


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
