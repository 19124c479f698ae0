"""Core Tensor type and graph traversal for the reverse-mode engine.

Every value is stored as a float64 numpy array. A Tensor produced by an
operation remembers its parents and a closure that maps the gradient of the
output to gradients of the inputs. ``backward`` walks the graph in reverse
topological order and accumulates into the ``grad`` of leaves.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True
_FLOP_COUNTERS: list["FlopCounter"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on contract violations of the differentiation engine."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class FlopCounter:
    """Accumulates multiply-add based FLOP estimates of ops executed while active.

    Counts are structural (derived from shapes), so they are exact and
    reproducible; only the dominant terms (matmul, convolution, attention) are
    counted.
    """

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, flops: int) -> None:
        self.total += int(flops)
        self.by_op[op] = self.by_op.get(op, 0) + int(flops)


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


def record_flops(op: str, flops: int) -> None:
    for counter in _FLOP_COUNTERS:
        counter.add(op, flops)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __array_priority__ = 100  # make numpy defer to Tensor's reflected operators

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "leaf",
    ) -> None:
        arr = np.asarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self.name: str | None = None

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``grad`` of every reachable leaf with d(self)/d(leaf).

        Gradients accumulate into existing leaf ``grad`` buffers; call
        ``zero_grad`` (or the optimizer's) between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise GraphError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}"
                    )
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar (implemented in ops) -----------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops

        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap ``data`` as the output of an op, attaching the graph only if needed."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


@dataclass
class GraphNode:
    id: int
    op: str
    inputs: list[int]
    shape: tuple[int, ...]


@dataclass
class ComputeGraph:
    """Topologically ordered record of the operations that produced a tensor."""

    nodes: list[GraphNode] = field(default_factory=list)

    def validate(self) -> None:
        seen: set[int] = set()
        for node in self.nodes:
            for i in node.inputs:
                if i not in seen:
                    raise GraphError(f"node {node.id} ({node.op}) consumes {i} before it is defined")
            seen.add(node.id)


def trace_graph(root: Tensor) -> ComputeGraph:
    """Snapshot the differentiable graph under ``root``; ids are dense and ordered."""
    order = _topological_order(root)
    ids = {id(t): i for i, t in enumerate(order)}
    nodes = [
        GraphNode(
            id=ids[id(t)],
            op=t._op,
            inputs=[ids[id(p)] for p in t._parents if id(p) in ids],
            shape=t.shape,
        )
        for t in order
    ]
    return ComputeGraph(nodes)
