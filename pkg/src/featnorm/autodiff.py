"""Reverse-mode automatic differentiation over dense 2-D tensors.

A ``Tape`` records every operation executed while it is active (entered as a
context manager). Each recorded node knows its parents and how to push its
output gradient back to them, so ``backward`` is a single reverse sweep over
the tape. Execution order is creation order, which is always a valid
topological order of the graph.

Values are dense row-major float64 arrays of shape (rows, cols). Operations
that see no active tape, or whose inputs carry no gradient requirement,
return plain constants and record nothing.
"""
from __future__ import annotations

import threading
from typing import Callable

import numpy as np

from .errors import ContractError, ShapeError

LOG_CLAMP = 1e-12
NORM_EPS = 1e-12


class Tensor:
    """A dense 2-D value grid, optionally attached to the active tape."""

    __slots__ = ("values", "node_id", "requires_grad", "_tape")

    def __init__(self, values: np.ndarray, requires_grad: bool = False):
        array = np.ascontiguousarray(values, dtype=np.float64)
        if array.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {array.shape}")
        self.values = array
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.values.shape}")
        return float(self.values[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    """A tensor that never carries gradient."""
    return Tensor(np.atleast_2d(np.asarray(values, dtype=np.float64)))


def leaf(values) -> Tensor:
    """A gradient-carrying input (network parameters); registered on a tape lazily."""
    return Tensor(np.atleast_2d(np.asarray(values, dtype=np.float64)), requires_grad=True)


class _Node:
    __slots__ = ("shape", "pull")

    def __init__(self, shape: tuple[int, int], pull: Callable | None):
        self.shape = shape
        # pull(output_grad, slots) accumulates into the parents' gradient slots;
        # None for leaves, which have no parents.
        self.pull = pull


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations plus per-node gradient slots.

    One tape belongs to one logical thread of execution; independent tapes
    may run concurrently on separate threads (the active-tape registry is
    thread-local).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _register(self, tensor: Tensor, pull: Callable | None) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node(tensor.shape, pull))
        tensor.node_id = node_id
        tensor._tape = self
        return node_id

    def ensure_on_tape(self, tensor: Tensor) -> int | None:
        """Return the tensor's node id on this tape, registering leaves lazily.

        Constants (requires_grad False) stay off the tape and return None.
        A gradient-carrying tensor registered on an older tape is re-registered
        here as a leaf; this is how persistent parameters join each batch's tape.
        """
        if not tensor.requires_grad:
            return None
        if tensor._tape is self and tensor.node_id is not None:
            return tensor.node_id
        return self._register(tensor, None)


def _record(out_values: np.ndarray, inputs: tuple[Tensor, ...], make_pull) -> Tensor:
    """Run the shared record-if-needed logic for an operation.

    ``make_pull(parent_ids)`` builds the gradient-pushing closure; it is only
    called when some input requires gradient and a tape is active.
    """
    tape = active_tape()
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs_grad and tape is not None)
    if tape is None or not needs_grad:
        out.requires_grad = False
        return out
    parent_ids = tuple(tape.ensure_on_tape(t) for t in inputs)
    tape._register(out, make_pull(parent_ids))
    return out


def _accumulate(slots, node_id: int | None, shape: tuple[int, int], grad: np.ndarray) -> None:
    if node_id is None:
        return
    if slots[node_id] is None:
        slots[node_id] = np.zeros(shape, dtype=np.float64)
    slots[node_id] += grad


def backward(root: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root; returns gradients keyed by node id.

    Every node on the tape gets an entry: zeros for nodes the root does not
    reach. A root that is a plain constant (e.g. a loss routed entirely
    through detach) reaches nothing, so every slot comes back zero.
    Accumulation order is the fixed reverse tape order, so repeated runs are
    bitwise identical.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward root must be 1x1, got shape {root.shape}")
    if root._tape is None:
        return {i: np.zeros(node.shape, dtype=np.float64) for i, node in enumerate(tape.nodes)}
    if root._tape is not tape or root.node_id is None:
        raise ContractError("backward root is not on the given tape")
    slots: list[np.ndarray | None] = [None] * len(tape.nodes)
    slots[root.node_id] = np.ones((1, 1), dtype=np.float64)
    for node_id in range(root.node_id, -1, -1):
        grad = slots[node_id]
        if grad is None:
            continue
        pull = tape.nodes[node_id].pull
        if pull is not None:
            pull(grad, slots)
    return {
        i: (slots[i] if slots[i] is not None else np.zeros(node.shape, dtype=np.float64))
        for i, node in enumerate(tape.nodes)
    }


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    a_values, b_values = a.values, b.values
    out_values = a_values @ b_values

    def make_pull(parents):
        a_id, b_id = parents

        def pull(g, slots):
            _accumulate(slots, a_id, a_values.shape, g @ b_values.T)
            _accumulate(slots, b_id, b_values.shape, a_values.T @ g)

        return pull

    return _record(out_values, (a, b), make_pull)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.rows != 1 or x.cols != b.cols:
        raise ShapeError(f"add_bias needs x[n x m] and b[1 x m], got {x.shape} and {b.shape}")
    out_values = x.values + b.values
    x_shape, b_shape = x.shape, b.shape

    def make_pull(parents):
        x_id, b_id = parents

        def pull(g, slots):
            _accumulate(slots, x_id, x_shape, g)
            _accumulate(slots, b_id, b_shape, g.sum(axis=0, keepdims=True))

        return pull

    return _record(out_values, (x, b), make_pull)


def relu(x: Tensor) -> Tensor:
    x_values = x.values
    out_values = np.maximum(x_values, 0.0)

    def make_pull(parents):
        (x_id,) = parents
        mask = x_values > 0.0  # subgradient at 0 is 0

        def pull(g, slots):
            _accumulate(slots, x_id, x_values.shape, g * mask)

        return pull

    return _record(out_values, (x,), make_pull)


def row_l2_norm(x: Tensor) -> Tensor:
    """Per-row Euclidean norm, n x m -> n x 1. Rows below NORM_EPS get zero gradient."""
    x_values = x.values
    norms = np.sqrt(np.sum(x_values * x_values, axis=1, keepdims=True))

    def make_pull(parents):
        (x_id,) = parents
        safe = np.where(norms < NORM_EPS, 1.0, norms)
        inverse = np.where(norms < NORM_EPS, 0.0, 1.0 / safe)

        def pull(g, slots):
            _accumulate(slots, x_id, x_values.shape, g * inverse * x_values)

        return pull

    return _record(norms, (x,), make_pull)


def softmax_rows(z: Tensor) -> Tensor:
    """Numerically stable per-row softmax (row max subtracted before exp)."""
    shifted = z.values - z.values.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)

    def make_pull(parents):
        (z_id,) = parents

        def pull(g, slots):
            inner = np.sum(g * probs, axis=1, keepdims=True)
            _accumulate(slots, z_id, probs.shape, probs * (g - inner))

        return pull

    return _record(probs, (z,), make_pull)


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path back to x."""
    return Tensor(x.values.copy())


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out_values = a.values + b.values
    shape = a.shape

    def make_pull(parents):
        a_id, b_id = parents

        def pull(g, slots):
            _accumulate(slots, a_id, shape, g)
            _accumulate(slots, b_id, shape, g)

        return pull

    return _record(out_values, (a, b), make_pull)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("subtract", a, b)
    out_values = a.values - b.values
    shape = a.shape

    def make_pull(parents):
        a_id, b_id = parents

        def pull(g, slots):
            _accumulate(slots, a_id, shape, g)
            _accumulate(slots, b_id, shape, -g)

        return pull

    return _record(out_values, (a, b), make_pull)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("multiply", a, b)
    a_values, b_values = a.values, b.values
    out_values = a_values * b_values

    def make_pull(parents):
        a_id, b_id = parents

        def pull(g, slots):
            _accumulate(slots, a_id, a_values.shape, g * b_values)
            _accumulate(slots, b_id, b_values.shape, g * a_values)

        return pull

    return _record(out_values, (a, b), make_pull)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out_values = x.values * c
    shape = x.shape

    def make_pull(parents):
        (x_id,) = parents

        def pull(g, slots):
            _accumulate(slots, x_id, shape, g * c)

        return pull

    return _record(out_values, (x,), make_pull)


def square(x: Tensor) -> Tensor:
    x_values = x.values
    out_values = x_values * x_values

    def make_pull(parents):
        (x_id,) = parents

        def pull(g, slots):
            _accumulate(slots, x_id, x_values.shape, 2.0 * x_values * g)

        return pull

    return _record(out_values, (x,), make_pull)


def log(x: Tensor) -> Tensor:
    """Elementwise natural log with the input clamped at LOG_CLAMP.

    Below the clamp the output is constant, so the gradient there is zero.
    """
    x_values = x.values
    clamped = np.maximum(x_values, LOG_CLAMP)
    out_values = np.log(clamped)

    def make_pull(parents):
        (x_id,) = parents
        derivative = np.where(x_values >= LOG_CLAMP, 1.0 / clamped, 0.0)

        def pull(g, slots):
            _accumulate(slots, x_id, x_values.shape, g * derivative)

        return pull

    return _record(out_values, (x,), make_pull)


def mean_all(x: Tensor) -> Tensor:
    x_shape = x.shape
    size = x_shape[0] * x_shape[1]
    out_values = np.array([[x.values.mean()]])

    def make_pull(parents):
        (x_id,) = parents

        def pull(g, slots):
            _accumulate(slots, x_id, x_shape, np.full(x_shape, g[0, 0] / size))

        return pull

    return _record(out_values, (x,), make_pull)


def sum_all(x: Tensor) -> Tensor:
    x_shape = x.shape
    out_values = np.array([[x.values.sum()]])

    def make_pull(parents):
        (x_id,) = parents

        def pull(g, slots):
            _accumulate(slots, x_id, x_shape, np.full(x_shape, g[0, 0]))

        return pull

    return _record(out_values, (x,), make_pull)


def mean_rows(x: Tensor) -> Tensor:
    """Per-row mean, n x m -> n x 1."""
    x_shape = x.shape
    out_values = x.values.mean(axis=1, keepdims=True)

    def make_pull(parents):
        (x_id,) = parents

        def pull(g, slots):
            _accumulate(slots, x_id, x_shape, np.broadcast_to(g / x_shape[1], x_shape).copy())

        return pull

    return _record(out_values, (x,), make_pull)


def row_sum(x: Tensor) -> Tensor:
    """Per-row sum, n x m -> n x 1."""
    x_shape = x.shape
    out_values = x.values.sum(axis=1, keepdims=True)

    def make_pull(parents):
        (x_id,) = parents

        def pull(g, slots):
            _accumulate(slots, x_id, x_shape, np.broadcast_to(g, x_shape).copy())

        return pull

    return _record(out_values, (x,), make_pull)


def _require_same_shape(op_name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op_name} needs matching shapes, got {a.shape} and {b.shape}")
