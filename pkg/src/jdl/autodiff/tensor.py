"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records a graph node when grad recording is on and at least
one input requires grad. Nodes carry a monotonically increasing sequence
number; ``backward`` replays the nodes reachable from the loss in reverse
insertion order, visiting each exactly once and accumulating gradients
additively across fan-out.

Graph construction and backward are single-threaded. A tensor whose data is
populated and which is not part of a pending graph is immutable by
convention and safe to share across threads.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import NotScalar

_node_seq = itertools.count()

# Set of kinds observed while an op_count() context is active.
_counters: list[dict] = []

_grad_enabled = True


class Node:
    """One recorded primitive application: kind, parents, backward rule."""

    __slots__ = ("kind", "parents", "backward_fn", "seq")

    def __init__(self, kind: str, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]):
        self.kind = kind
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.seq = next(_node_seq)


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked by the graph."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Same data, cut from the graph; gradient of anything through a
        detached branch is exactly zero."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward values are still computed."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def op_count():
    """Count primitive applications by kind within the context.

    Yields a dict that fills in place; useful for asserting that a code path
    runs the encoder once rather than twice.
    """
    counter: dict = {}
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(kind: str) -> None:
    for counter in _counters:
        counter[kind] = counter.get(kind, 0) + 1


def record(kind: str, parents: Sequence[Tensor], out_data: np.ndarray,
           backward_fn) -> Tensor:
    """Wrap a primitive result, attaching a graph node when tracking."""
    _tally(kind)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out.node = Node(kind, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate additively into existing ``grad`` buffers, so call
    ``zero_grad`` between optimization steps.
    """
    if loss.data.shape not in ((), (1,)):
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.node is None:
        if loss.requires_grad and loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        return

    # Collect the subgraph reachable from the loss.
    reachable: list[Node] = []
    seen: set[int] = set()
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        reachable.append(node)
        for p in node.parents:
            if p.node is not None and id(p.node) not in seen:
                stack.append(p.node)

    reachable.sort(key=lambda n: n.seq, reverse=True)

    # Gradient buffers keyed by producing node; leaves accumulate in place.
    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reachable:
        out_grad = grads.pop(id(node), None)
        if out_grad is None:
            continue  # node feeds nothing on the path to the loss
        parent_grads = node.backward_fn(out_grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.node is None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            else:
                key = id(parent.node)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
