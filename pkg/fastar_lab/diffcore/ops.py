"""Differentiable primitives.

Every primitive computes its value with numpy, then hands the value and a
vector-Jacobian product to :func:`fastar_lab.diffcore.tensor.emit`. Python
numbers are folded in as constants so they never promote single-precision
arrays.
"""

from __future__ import annotations

from numbers import Number
from typing import Sequence

import numpy as np

from fastar_lab.diffcore.tensor import Tensor, as_tensor, emit
from fastar_lab.exceptions import ShapeMismatchError

LAYERNORM_EPS = 1e-6
GELU_COEF = 0.044715
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

# Additive attention bias for disallowed positions; finite so forward checks hold.
MASK_VALUE = -1e30

PRIMITIVES = (
    "add",
    "sub",
    "scale",
    "mul",
    "matmul",
    "exp",
    "square",
    "tanh",
    "silu",
    "gelu",
    "layernorm",
    "softmax",
    "concat",
    "slice",
    "take",
    "batch_take",
    "reshape",
    "transpose",
    "sum",
    "mse",
    "stopgrad",
)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_value(op: str, fn, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatchError(op, f"cannot broadcast {a.shape} with {b.shape}") from exc
    return fn(a, b)


def add(a, b) -> Tensor:
    if isinstance(b, Number):
        a, c = as_tensor(a), float(b)
        return emit("add", (a,), a.data + c, lambda g: (g,))
    if isinstance(a, Number):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    value = _broadcast_value("add", np.add, a.data, b.data)
    return emit("add", (a, b), value, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if isinstance(b, Number):
        return add(a, -float(b))
    if isinstance(a, Number):
        b, c = as_tensor(b), float(a)
        return emit("sub", (b,), c - b.data, lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    value = _broadcast_value("sub", np.subtract, a.data, b.data)
    return emit("sub", (a, b), value, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    if isinstance(b, Number):
        a, c = as_tensor(a), float(b)
        return emit("scale", (a,), a.data * c, lambda g: (g * c,))
    if isinstance(a, Number):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    value = _broadcast_value("mul", np.multiply, a.data, b.data)
    return emit(
        "mul",
        (a, b),
        value,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    try:
        value = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError("matmul", f"cannot multiply {a.shape} by {b.shape}") from exc

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return emit("matmul", (a, b), value, backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    value = np.exp(x.data)
    return emit("exp", (x,), value, lambda g: (g * value,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return emit("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    value = np.tanh(x.data)
    return emit("tanh", (x,), value, lambda g: (g * (1.0 - value * value),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return emit("silu", (x,), x.data * sig, lambda g: (g * (sig + x.data * sig * (1.0 - sig)),))


def gelu(x) -> Tensor:
    """GELU with the tanh approximation."""
    x = as_tensor(x)
    inner = _SQRT_2_OVER_PI * (x.data + GELU_COEF * x.data**3)
    th = np.tanh(inner)
    value = 0.5 * x.data * (1.0 + th)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x.data**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * d_inner),)

    return emit("gelu", (x,), value, backward)


def layernorm(x, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        mean_g = g.mean(axis=-1, keepdims=True)
        mean_gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - mean_g - xhat * mean_gx),)

    return emit("layernorm", (x,), xhat, backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    return emit("softmax", (x,), value, lambda g: (value * (g - (g * value).sum(axis=axis, keepdims=True)),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError("concat", f"shapes {[t.shape for t in tensors]} along axis {axis}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return emit("concat", tuple(tensors), value, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_(x, key) -> Tensor:
    """Basic (view) indexing: ints, slices, ellipsis."""
    x = as_tensor(x)
    value = x.data[key]

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[key] = g
        return (grad,)

    return emit("slice", (x,), np.array(value), backward)


def take(table, idx) -> Tensor:
    """Rows of ``table`` at integer indices of any shape (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatchError("take", f"index out of range for table of {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return emit("take", (table,), table.data[idx], backward)


def batch_take(x, idx) -> Tensor:
    """Per-row gather along axis 1: ``x`` is (B, T, ...), ``idx`` is (B, n)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeMismatchError("batch_take", f"index shape {idx.shape} for input {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeMismatchError("batch_take", f"index out of range for axis of length {x.shape[1]}")
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, idx), g)
        return (grad,)

    return emit("batch_take", (x,), x.data[rows, idx], backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError("reshape", f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return emit("reshape", (x,), value, lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def sum_(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    value = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return emit("sum", (x,), np.asarray(value), backward)


def mean(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mse(pred, target) -> Tensor:
    """Squared L2 error over the last axis, averaged over all leading positions."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError("mse", f"prediction {pred.shape} vs target {target.shape}")
    rows = max(pred.size // pred.shape[-1], 1) if pred.ndim else 1
    diff = pred.data - target.data
    value = np.asarray((diff * diff).sum() / rows)
    return emit("mse", (pred, target), value, lambda g: (2.0 * g * diff / rows, -2.0 * g * diff / rows))


def stopgrad(x) -> Tensor:
    """Identity in value; passes no gradient upstream."""
    x = as_tensor(x)
    return emit("stopgrad", (x,), x.data.copy(), lambda g: (None,))
