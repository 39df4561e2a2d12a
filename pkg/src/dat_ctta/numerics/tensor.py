"""Tape-based reverse-mode autodiff over numpy arrays.

A :class:`Graph` is a tape. While one is active (``with Graph() as g:``), every
op whose inputs include a tensor with ``requires_grad`` appends a node holding
its output, its inputs and a vector-Jacobian closure. Nodes are appended in
execution order, so the tape is already a topological order and ``backward``
just walks it in reverse.

Tensors are value-like wrappers around a numpy array. Parameters are leaf
tensors whose ``data`` is a view into a model's flat parameter vector, so
in-place updates of the flat vector are visible without rebuilding leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError

DEFAULT_DTYPE = np.float32

_ACTIVE: list["Graph"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Graph:
    """Operation tape. Rebuilt for every forward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(arr: np.ndarray, where: str) -> None:
    # A single NaN/Inf anywhere poisons the sum; much cheaper than isfinite().all().
    if not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by {where}")


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result, appending a tape node when gradients are needed."""
    check_finite(out_data, op)
    needs_grad = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        _ACTIVE[-1].nodes.append(Node(out, tuple(inputs), vjp, op))
    return out


class Gradients:
    """Leaf gradients produced by :func:`backward`, looked up by tensor."""

    def __init__(self, grads: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        self._grads = grads
        self._leaves = leaves

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __len__(self) -> int:
        return len(self._grads)


def backward(graph: Graph, loss: Tensor) -> Gradients:
    """Gradients of a scalar ``loss`` with respect to every leaf on the tape.

    Leaves that are not ancestors of ``loss`` get no entry (lookups return
    zeros). The tape is left intact, so several losses recorded on the same
    graph can each be differentiated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Gradients({}, {})
    end = None
    for i in range(len(graph.nodes) - 1, -1, -1):
        if graph.nodes[i].out is loss:
            end = i
            break
    if end is None:
        raise ContractError("loss tensor was not recorded on this graph")

    produced = {id(n.out) for n in graph.nodes[: end + 1]}
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes[: end + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            check_finite(gi, f"backward of {node.op}")
            key = id(t)
            if key in produced:
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                prev = leaf_grads.get(key)
                leaf_grads[key] = gi if prev is None else prev + gi
                leaves[key] = t
    return Gradients(leaf_grads, leaves)
