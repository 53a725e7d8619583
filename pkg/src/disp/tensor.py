"""
Dense Tensor Engine
===================
A small numpy-backed tensor with define-by-run reverse-mode differentiation.

Every differentiable operation is a `Function` subclass with a `forward`
over raw arrays and a `backward` that maps the output gradient onto one
gradient per input. The graph is rebuilt on every forward pass; `backward`
walks the reachable nodes in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
from typing import Any, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from disp.errors import ConfigError, DimensionError, UsageError

logger = logging.getLogger(__name__)

PRECISIONS = {"f64": np.float64, "f32": np.float32}

_default_dtype: type = np.float64
_grad_enabled = True
_creation_counter = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


def set_precision(name: str) -> None:
    """Select the scalar type of every tensor built afterwards ('f64' or 'f32')."""
    global _default_dtype
    if name not in PRECISIONS:
        raise ConfigError(f"Unknown precision '{name}', expected one of {sorted(PRECISIONS)}")
    _default_dtype = PRECISIONS[name]
    logger.debug("Tensor precision set to %s", name)


def get_dtype() -> type:
    return _default_dtype


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation, perplexity, equivalence checks)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"Shapes {a.shape} and {b.shape} cannot be broadcast") from e


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> "Tensor":
        tensors = tuple(as_tensor(t) for t in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, _creator=fn if requires_grad else None)


class Tensor:
    """
    Dense n-dimensional array that can take part in a differentiation graph.

    `grad` is a plain array of the same shape, populated by `backward` on
    every reachable tensor with `requires_grad=True`.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[type] = None,
        _creator: Optional[Function] = None,
    ):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._creator = _creator
        self._order = next(_creation_counter)

    # ---- array protocol -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---- gradients ------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Populate `grad` on every reachable tensor that requires it."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not part of a graph")

        reachable = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in reachable:
                continue
            reachable[id(node)] = node
            if node._creator is not None:
                stack.extend(t for t in node._creator.inputs if t.requires_grad)

        pending = {id(self): np.ones_like(self.data)}
        for node in sorted(reachable.values(), key=lambda t: t._order, reverse=True):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node._accumulate(grad)
            if node._creator is None:
                continue
            for parent, parent_grad in zip(node._creator.inputs, node._creator.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + parent_grad
                else:
                    pending[id(parent)] = parent_grad

    # ---- operators ------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, other)

    def __neg__(self) -> "Tensor":
        return Mul.apply(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return Slice.apply(self, key=key)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------
class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(grad / b.data, a.shape),
            _unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is symmetric and never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Sigmoid(Function):
    def forward(self, x):
        self.out = _sigmoid(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


class Gelu(Function):
    """tanh approximation of GeLU"""

    def forward(self, x):
        self.t = np.tanh(_GELU_K * (x + _GELU_C * x**3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x = self.inputs[0].data
        dt = (1.0 - self.t**2) * _GELU_K * (1.0 + 3.0 * _GELU_C * x**2)
        return (grad * (0.5 * (1.0 + self.t) + 0.5 * x * dt),)


class Silu(Function):
    def forward(self, x):
        self.s = _sigmoid(x)
        return x * self.s

    def backward(self, grad):
        x = self.inputs[0].data
        return (grad * (self.s + x * self.s * (1.0 - self.s)),)


class Log(Function):
    def forward(self, x):
        return np.log(x)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Maximum(Function):
    """Ties send the gradient to the first argument."""

    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.pick_a = a >= b
        return np.maximum(a, b)

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(np.where(self.pick_a, grad, 0.0), a.shape),
            _unbroadcast(np.where(self.pick_a, 0.0, grad), b.shape),
        )


class Minimum(Function):
    """Ties send the gradient to the first argument."""

    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.pick_a = a <= b
        return np.minimum(a, b)

    def backward(self, grad):
        a, b = self.inputs
        return (
            _unbroadcast(np.where(self.pick_a, grad, 0.0), a.shape),
            _unbroadcast(np.where(self.pick_a, 0.0, grad), b.shape),
        )


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(a, b)


def sigmoid(x: ArrayLike) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: ArrayLike) -> Tensor:
    return Tanh.apply(x)


def gelu(x: ArrayLike) -> Tensor:
    return Gelu.apply(x)


def silu(x: ArrayLike) -> Tensor:
    return Silu.apply(x)


def log(x: ArrayLike) -> Tensor:
    return Log.apply(x)


def exp(x: ArrayLike) -> Tensor:
    return Exp.apply(x)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Maximum.apply(a, b)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Minimum.apply(a, b)


def broadcast_mul_rowvec(x: ArrayLike, row: ArrayLike) -> Tensor:
    """Scale the last axis of `x` by a 1-D row vector."""
    x, row = as_tensor(x), as_tensor(row)
    if row.ndim != 1 or x.ndim == 0 or row.shape[0] != x.shape[-1]:
        raise DimensionError(f"Row vector {row.shape} does not match trailing axis of {x.shape}")
    return Mul.apply(x, row)


def stop_gradient(x: ArrayLike) -> Tensor:
    """Same value, no gradient path."""
    return Tensor(as_tensor(x).data, requires_grad=False)


# ---------------------------------------------------------------------------
# Linear algebra and shape
# ---------------------------------------------------------------------------
class MatMul(Function):
    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes (leading axes broadcast).

    A zero-width contraction (k == 0) gives an all-zero result.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


class Reshape(Function):
    def forward(self, x, shape):
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, x, axes):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class Sum(Function):
    def forward(self, x, axis, keepdims):
        self.axis, self.keepdims = axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape),)


class Slice(Function):
    def forward(self, x, key):
        self.key = key
        return x[key]

    def backward(self, grad):
        out = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        np.add.at(out, self.key, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Embedding(Function):
    def forward(self, weight, tokens):
        self.tokens = tokens
        return weight[tokens]

    def backward(self, grad):
        out = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        np.add.at(out, self.tokens, grad)
        return (out,)


def embedding(weight: Tensor, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= weight.shape[0]):
        raise DimensionError(f"Token ids must lie in [0, {weight.shape[0]})")
    return Embedding.apply(weight, tokens=tokens)


# ---------------------------------------------------------------------------
# Gather / scatter on the last axis
# ---------------------------------------------------------------------------
class IndexSelect(Function):
    def forward(self, x, indices):
        self.indices = indices
        return x[..., indices]

    def backward(self, grad):
        out = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        out[..., self.indices] = grad
        return (out,)


class IndexAdd(Function):
    def forward(self, a, b, indices):
        self.indices = indices
        out = a.copy()
        out[..., indices] += b
        return out

    def backward(self, grad):
        return grad, _unbroadcast(grad[..., self.indices], self.inputs[1].shape)


def _check_indices(indices: np.ndarray, width: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= width):
        raise DimensionError(f"Index out of range for width {width}")
    return indices


def index_select(x: ArrayLike, indices: Sequence[int]) -> Tensor:
    """Gather the listed columns of the last axis."""
    x = as_tensor(x)
    return IndexSelect.apply(x, indices=_check_indices(indices, x.shape[-1]))


def index_add(a: ArrayLike, b: ArrayLike, indices: Sequence[int]) -> Tensor:
    """Add the columns of `b` onto the listed columns of `a`; other columns pass through."""
    a, b = as_tensor(a), as_tensor(b)
    indices = _check_indices(indices, a.shape[-1])
    if b.shape[-1] != indices.size:
        raise DimensionError(f"index_add width mismatch: {b.shape[-1]} columns for {indices.size} indices")
    return IndexAdd.apply(a, b, indices=indices)


# ---------------------------------------------------------------------------
# Softmax, normalization, loss
# ---------------------------------------------------------------------------
class Softmax(Function):
    def forward(self, x, additive_mask):
        if additive_mask is not None:
            x = x + additive_mask
        shifted = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=-1, keepdims=True)),)


def softmax_lastdim(x: ArrayLike, additive_mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; `additive_mask` (e.g. -inf above the diagonal) is added first."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    return Softmax.apply(x, additive_mask=additive_mask)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


def _mask_array(mask: Any, width: int) -> np.ndarray:
    if mask is None:
        return np.ones(width)
    arr = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64).reshape(-1)
    if arr.shape[0] != width:
        raise DimensionError(f"Mask of width {arr.shape[0]} does not match feature width {width}")
    return arr


class MaskedLayerNorm(Function):
    """LayerNorm whose mean and variance only see coordinates with mask == 1."""

    def forward(self, x, gain, bias, mask, eps):
        m = mask.astype(x.dtype)
        self.m = m
        self.count = float(m.sum())
        if self.count == 0:
            self.xhat = np.zeros_like(x)
            return np.zeros_like(x)
        mu = np.sum(x * m, axis=-1, keepdims=True) / self.count
        centered = (x - mu) * m
        var = np.sum(centered * centered, axis=-1, keepdims=True) / self.count
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.rstd
        return (self.xhat * gain + bias) * m

    def backward(self, grad):
        x, gain, bias = self.inputs
        lead = tuple(range(grad.ndim - 1))
        grad_gain = np.sum(grad * self.xhat, axis=lead)
        grad_bias = np.sum(grad * self.m, axis=lead)
        if self.count == 0:
            return np.zeros_like(grad), grad_gain, grad_bias
        dxhat = grad * gain.data * self.m
        mean_d = np.sum(dxhat, axis=-1, keepdims=True) / self.count
        mean_dx = np.sum(dxhat * self.xhat, axis=-1, keepdims=True) / self.count
        grad_x = self.rstd * (dxhat - mean_d - self.xhat * mean_dx) * self.m
        return grad_x, grad_gain, grad_bias


class MaskedRMSNorm(Function):
    """RMSNorm whose mean square only sees coordinates with mask == 1."""

    def forward(self, x, gain, mask, eps):
        m = mask.astype(x.dtype)
        self.m = m
        self.count = float(m.sum())
        if self.count == 0:
            self.xhat = np.zeros_like(x)
            return np.zeros_like(x)
        ms = np.sum(x * x * m, axis=-1, keepdims=True) / self.count
        self.rstd = 1.0 / np.sqrt(ms + eps)
        self.xhat = x * self.rstd * m
        return self.xhat * gain * m

    def backward(self, grad):
        x, gain = self.inputs
        lead = tuple(range(grad.ndim - 1))
        grad_gain = np.sum(grad * self.xhat, axis=lead)
        if self.count == 0:
            return np.zeros_like(grad), grad_gain
        dxhat = grad * gain.data * self.m
        mean_dx = np.sum(dxhat * self.xhat, axis=-1, keepdims=True) / self.count
        return self.rstd * (dxhat - self.xhat * mean_dx) * self.m, grad_gain


def masked_layernorm(
    x: ArrayLike, mask: Any, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5
) -> Tensor:
    """
    Normalize over the active coordinates of `mask` only.

    Inactive coordinates come out exactly 0; an all-zero mask gives all zeros.
    `mask=None` is an ordinary LayerNorm.
    """
    x = as_tensor(x)
    width = x.shape[-1]
    return MaskedLayerNorm.apply(x, gain, bias, mask=_mask_array(mask, width), eps=eps)


def masked_rmsnorm(x: ArrayLike, mask: Any, gain: ArrayLike, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    return MaskedRMSNorm.apply(x, gain, mask=_mask_array(mask, x.shape[-1]), eps=eps)


def layernorm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    return masked_layernorm(x, None, gain, bias, eps)


class CrossEntropy(Function):
    def forward(self, logits, targets):
        flat = logits.reshape(-1, logits.shape[-1])
        self.targets = targets.reshape(-1)
        shifted = flat - np.max(flat, axis=-1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        self.log_probs = shifted - lse
        picked = self.log_probs[np.arange(flat.shape[0]), self.targets]
        return np.asarray(-np.mean(picked))

    def backward(self, grad):
        n = self.log_probs.shape[0]
        probs = np.exp(self.log_probs)
        probs[np.arange(n), self.targets] -= 1.0
        return ((grad * probs / n).reshape(self.inputs[0].shape),)


def cross_entropy(logits: ArrayLike, targets: np.ndarray) -> Tensor:
    """Mean token-level cross-entropy in nats."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"Targets {targets.shape} do not match logits {logits.shape}")
    if targets.size == 0:
        raise UsageError("cross_entropy over zero tokens")
    return CrossEntropy.apply(logits, targets=targets)
