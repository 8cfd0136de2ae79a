"""Dense tensors and the tape that records operations on them.

A :class:`Graph` is entered as a context manager; while it is active every
primitive in :mod:`fastar_lab.diffcore.ops` whose inputs require gradients is
appended to it as a :class:`Node`. Recording order is a valid topological
order, so the backward pass is a single reverse sweep over ``Graph.nodes``.
Outside a graph (or when no input requires gradients) primitives only compute
values, which is how sampling and EMA targets run.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from fastar_lab.exceptions import NonFiniteError, NonScalarObjectiveError

DEFAULT_DTYPE = np.float64

_ACTIVE_GRAPH: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar("active_graph", default=None)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            floating = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if floating else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar, resolved lazily to avoid a circular import.
    def __add__(self, other):
        from fastar_lab.diffcore import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from fastar_lab.diffcore import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from fastar_lab.diffcore import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from fastar_lab.diffcore import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from fastar_lab.diffcore import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from fastar_lab.diffcore import ops

        return ops.matmul(self, other)


def as_tensor(value) -> Tensor:
    """Wrap arrays and numbers as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass(frozen=True)
class Node:
    """One recorded primitive: its inputs, its output and its vector-Jacobian product."""

    node_id: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Graph:
    """Ordered record of primitive operations with a marked set of trainable leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Tensor] = {}
        self._ids = itertools.count()
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None

    def next_id(self) -> int:
        return next(self._ids)

    def leaf(self, name: str, value, trainable: bool = True) -> Tensor:
        """Register a named leaf; trainable leaves receive gradients."""
        tensor = Tensor(value, requires_grad=trainable, name=name)
        tensor.node_id = self.next_id()
        if trainable:
            self.leaves[name] = tensor
        return tensor

    def backward(self, objective: Tensor) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar objective; returns the gradient of every trainable leaf."""
        if objective.size != 1:
            raise NonScalarObjectiveError(objective.shape)
        grads: dict[int, np.ndarray] = {}
        if objective.requires_grad:
            grads[objective.node_id] = np.ones_like(objective.data)
        for node in reversed(self.nodes):
            upstream = grads.pop(node.output.node_id, None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad or tensor.node_id is None:
                    continue
                if not np.all(np.isfinite(grad)):
                    raise NonFiniteError(f"gradient of {node.op}", node_id=node.node_id)
                if tensor.node_id in grads:
                    grads[tensor.node_id] = grads[tensor.node_id] + grad
                else:
                    grads[tensor.node_id] = grad
        return {
            name: grads.get(tensor.node_id, np.zeros_like(tensor.data)).reshape(tensor.shape)
            for name, tensor in self.leaves.items()
        }


def active_graph() -> Graph | None:
    return _ACTIVE_GRAPH.get()


def emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap a primitive's value as a tensor, check it, and record it on the active graph."""
    graph = active_graph()
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"forward value of {op}", node_id=None if graph is None else len(graph.nodes))
    requires_grad = graph is not None and any(t.requires_grad and t.node_id is not None for t in inputs)
    out = Tensor(value, requires_grad=requires_grad)
    if requires_grad:
        out.node_id = graph.next_id()
        graph.nodes.append(Node(out.node_id, op, tuple(inputs), out, backward))
    return out
