"""Tensor, tape-based graph and the reverse-mode driver.

Every differentiable operation is recorded on a :class:`Graph` (an append-only
tape).  Backward rules are themselves written with recorded operations, so a
gradient computed with ``create_graph=True`` is an ordinary graph value that
can be differentiated again.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_OPS: dict[str, type] = {}


class ShapeError(ValueError):
    """Input shapes are not valid for the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the graph: consumed tape, mixed graphs, non-scalar root."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was found in a graph value."""

    def __init__(self, message: str, node_id: int | None = None, kind: str | None = None):
        super().__init__(message)
        self.node_id = node_id
        self.kind = kind


def register(kind: str):
    def wrap(cls):
        cls.kind = kind
        _OPS[kind] = cls
        return cls

    return wrap


def op_kinds() -> list[str]:
    return sorted(_OPS)


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.graphs: list[Graph] = []
        self.default: Graph | None = None


_state = _State()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@dataclass
class Node:
    op: Any
    inputs: tuple | None
    value: np.ndarray | None

    @property
    def freed(self) -> bool:
        return self.inputs is None


class Graph:
    """Append-only tape of operation records.

    Use as a context manager to make it the active graph for the current
    thread.  Node ids are positions on the tape, so inputs always precede the
    nodes that consume them.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grad_slots: dict[int, Tensor] = {}

    def __enter__(self) -> Graph:
        _state.graphs.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.graphs.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def first_nonfinite(self) -> tuple[int, str] | None:
        """Return ``(node_id, op kind)`` of the first node holding NaN/Inf."""
        for i, node in enumerate(self.nodes):
            if node.value is not None and not np.all(np.isfinite(node.value)):
                return i, node.op.kind
        return None

    def check_finite(self) -> None:
        hit = self.first_nonfinite()
        if hit is not None:
            i, kind = hit
            raise NonFiniteError(f"non-finite value first produced by node {i} ({kind})", i, kind)


def active_graph() -> Graph:
    if _state.graphs:
        return _state.graphs[-1]
    if _state.default is None:
        _state.default = Graph()
    return _state.default


class Tensor:
    """n-d float64 array that can take part in a recorded computation.

    Leaves (parameters, inputs) have ``node_id is None``; values produced by
    recorded operations carry the graph and their tape position and must not
    be mutated.
    """

    __slots__ = ("data", "requires_grad", "graph", "node_id", "grad", "name")
    __array_ufunc__ = None

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.graph: Graph | None = None
        self.node_id: int | None = None
        self.grad: Tensor | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6, threshold=20)}{rg}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return record_op("add", [self, other])

    def __radd__(self, other):
        return record_op("add", [other, self])

    def __sub__(self, other):
        return record_op("sub", [self, other])

    def __rsub__(self, other):
        return record_op("sub", [other, self])

    def __mul__(self, other):
        return record_op("mul", [self, other])

    def __rmul__(self, other):
        return record_op("mul", [other, self])

    def __truediv__(self, other):
        return record_op("div", [self, other])

    def __rtruediv__(self, other):
        return record_op("div", [other, self])

    def __neg__(self):
        return record_op("neg", [self])

    def __pow__(self, exponent: float):
        return record_op("pow", [self], exponent=float(exponent))

    def __matmul__(self, other):
        return record_op("matmul", [self, other])

    def __getitem__(self, index):
        return record_op("index", [self], index=index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return record_op("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int) -> Tensor:
        return record_op("max", [self], axis=axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record_op("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return record_op("transpose", [self], axes=tuple(axes))

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def exp(self) -> Tensor:
        return record_op("exp", [self])

    def log(self) -> Tensor:
        return record_op("log", [self])

    def sqrt(self) -> Tensor:
        return record_op("sqrt", [self])

    def abs(self) -> Tensor:
        return record_op("abs", [self])

    def relu(self) -> Tensor:
        return record_op("relu", [self])

    def flip(self, axis: int) -> Tensor:
        return record_op("flip", [self], axis=axis)

    def broadcast_to(self, shape) -> Tensor:
        return record_op("broadcast_to", [self], shape=tuple(shape))

    def sum_to(self, shape) -> Tensor:
        return record_op("sum_to", [self], shape=tuple(shape))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant_like(arr) -> Tensor:
    return Tensor(arr)


def _resolve_graph(inputs: Sequence[Tensor]) -> Graph:
    graph = None
    for t in inputs:
        if t.graph is not None:
            if graph is None:
                graph = t.graph
            elif t.graph is not graph:
                raise GraphError("inputs belong to different graphs")
    return graph if graph is not None else active_graph()


def record_op(kind: str, inputs: Iterable, **attrs) -> Tensor:
    """Evaluate operation ``kind`` eagerly and record it on the graph.

    Nothing is recorded when gradients are disabled or when no input
    requires a gradient; the result is then a constant.
    """
    try:
        cls = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tensors = tuple(as_tensor(x) for x in inputs)
    op = cls(**attrs)
    if hasattr(op, "check"):
        op.check(*(t.shape for t in tensors))
    value = np.asarray(op.forward(*(t.data for t in tensors)), dtype=DTYPE)
    needs = _state.grad_enabled and any(t.requires_grad for t in tensors)
    out = Tensor(value, requires_grad=needs)
    if needs:
        graph = _resolve_graph(tensors)
        out.graph = graph
        out.node_id = graph.append(Node(op, tensors, value))
    return out


def shape_error(kind: str, *shapes) -> ShapeError:
    return ShapeError(f"{kind}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


# ---------------------------------------------------------------------------
# reverse mode


def _accumulate(slot: dict, key, value: Tensor) -> None:
    prev = slot.get(key)
    slot[key] = value if prev is None else prev + value


def _sweep(root: Tensor, wanted: Callable[[Tensor], bool], create_graph: bool, retain_graph: bool):
    """Propagate d(root) backwards through the tape.

    ``wanted(t)`` marks tensors whose gradient the caller needs; only nodes
    with a wanted tensor upstream are visited.  Returns the node-gradient
    dict and the leaf-gradient dict (keyed by ``id``).
    """
    if root.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    graph = root.graph
    node_grads: dict[int, Tensor] = {}
    leaf_grads: dict[int, tuple[Tensor, Tensor]] = {}
    if graph is None:
        return node_grads, leaf_grads
    nodes = graph.nodes
    rid = root.node_id
    if nodes[rid].freed:
        raise GraphError("backward through a graph that was already consumed; pass retain_graph=True")

    live = bytearray(rid + 1)
    for i in range(rid + 1):
        node = nodes[i]
        if node.freed:
            continue
        for t in node.inputs:
            if (t.node_id is not None and t.graph is graph and live[t.node_id]) or (
                t.requires_grad and wanted(t)
            ):
                live[i] = 1
                break

    node_grads[rid] = Tensor(np.ones(root.shape))
    with graph, _grad_mode(create_graph):
        for i in range(rid, -1, -1):
            g = node_grads.get(i)
            if g is None or not live[i]:
                continue
            node = nodes[i]
            if node.freed:
                raise GraphError("backward through a graph that was already consumed; pass retain_graph=True")
            needs = tuple(
                t.requires_grad
                and ((t.node_id is not None and t.graph is graph and live[t.node_id]) or wanted(t))
                for t in node.inputs
            )
            if not any(needs):
                continue
            in_grads = node.op.backward(g, node.inputs, needs)
            for t, need, ig in zip(node.inputs, needs, in_grads):
                if not need or ig is None:
                    continue
                if ig.shape != t.shape:
                    raise ShapeError(f"{node.op.kind}: backward produced {ig.shape} for input {t.shape}")
                if t.node_id is not None and t.graph is graph:
                    _accumulate(node_grads, t.node_id, ig)
                if t.node_id is None:
                    prev = leaf_grads.get(id(t))
                    leaf_grads[id(t)] = (t, ig if prev is None else prev[1] + ig)

    if not retain_graph:
        for i in range(rid + 1):
            node = nodes[i]
            if node.inputs is not None:
                node.inputs = None
                node.value = None
                node.op = _Freed(node.op.kind)
    return node_grads, leaf_grads


class _Freed:
    def __init__(self, kind: str):
        self.kind = kind


def backward(root: Tensor, create_graph: bool = False, retain_graph: bool | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients of intermediate nodes are stored in ``graph.grad_slots``.
    """
    if retain_graph is None:
        retain_graph = create_graph
    node_grads, leaf_grads = _sweep(root, lambda t: t.node_id is None, create_graph, retain_graph)
    if root.graph is not None:
        for k, v in node_grads.items():
            root.graph.grad_slots[k] = v
    for t, g in leaf_grads.values():
        t.grad = g if t.grad is None else t.grad + g
    if root.node_id is None and root.requires_grad:
        if root.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {root.shape}")
        one = Tensor(np.ones(root.shape))
        root.grad = one if root.grad is None else root.grad + one


def grad_of(root: Tensor, wrt, create_graph: bool = False, retain_graph: bool | None = None):
    """Return d(root)/d(wrt) without touching ``.grad``.

    ``wrt`` may be a single tensor or a sequence.  Inputs that root does not
    depend on get a zero tensor of their own shape.  With ``create_graph``
    the result is differentiable.
    """
    if retain_graph is None:
        retain_graph = create_graph
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    for t in targets:
        if not t.requires_grad:
            raise GraphError("grad_of: wrt tensor does not require grad")
    ids = {id(t) for t in targets}
    node_ids = {t.node_id for t in targets if t.node_id is not None and t.graph is root.graph}
    if root.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")

    if root.graph is None:
        node_grads, leaf_grads = {}, {}
    else:
        def wanted(t: Tensor) -> bool:
            return id(t) in ids

        node_grads, leaf_grads = _sweep(root, wanted, create_graph, retain_graph)

    out = []
    for t in targets:
        if t is root:
            g = Tensor(np.ones(t.shape))
        elif t.node_id is not None and t.node_id in node_ids:
            g = node_grads.get(t.node_id)
        else:
            g = leaf_grads.get(id(t), (None, None))[1]
        out.append(g if g is not None else Tensor(np.zeros(t.shape)))
    return out[0] if single else out
