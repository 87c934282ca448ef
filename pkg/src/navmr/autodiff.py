"""Minimal reverse-mode differentiation over dense 1-D/2-D float arrays.

A :class:`Tape` records every node produced during one forward pass in
creation order, which is already a topological order, so the backward pass
is a single reversed sweep. All values and gradients are float64.

Shape support is deliberately narrow: exactly what the score-sequence model
needs. Elementwise ops broadcast a scalar against an array and a matrix
against a row vector; everything else requires matching shapes.

A tape is single-threaded; independent tapes share no state and may run
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Node:
    """One value in the computation graph.

    ``value`` and ``grad`` always share a shape; ``op`` is a provenance tag
    and ``parents`` the input nodes. Leaves have no parents.
    """

    __slots__ = ("value", "grad", "op", "parents", "_backward")

    def __init__(self, value: np.ndarray, op: str, parents: tuple["Node", ...],
                 backward: Callable[[np.ndarray], None] | None):
        self.value = value
        self.grad = np.zeros_like(value)
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(op={self.op!r}, shape={self.shape})"


class Tape:
    """Topologically ordered record of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _record(self, value: np.ndarray, op: str, parents: tuple[Node, ...],
                backward: Callable[[np.ndarray], None] | None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), op, parents, backward)
        self.nodes.append(node)
        return node

    def leaf(self, value: np.ndarray | float) -> Node:
        """Create an input node; its gradient is available after backward()."""
        arr = np.array(value, dtype=np.float64)
        if arr.ndim > 2:
            raise ValueError(f"only 0-D/1-D/2-D values are supported, got shape {arr.shape}")
        return self._record(arr, "leaf", (), None)

    def const(self, value: np.ndarray | float) -> Node:
        """Alias of leaf() used for values whose gradient is never read."""
        return self.leaf(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after one of the allowed broadcasts."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    # (m, n) op (n,) row-vector case
    if len(shape) == 1 and grad.ndim == 2 and grad.shape[1] == shape[0]:
        return grad.sum(axis=0)
    raise AssertionError(f"cannot reduce grad {grad.shape} to {shape}")


def _check_elementwise(a: Node, b: Node, op: str) -> None:
    sa, sb = a.value.shape, b.value.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def _binary(tape: Tape, a: Node, b: Node, op: str, value: np.ndarray,
            da: Callable[[np.ndarray], np.ndarray],
            db: Callable[[np.ndarray], np.ndarray]) -> Node:
    def backward(g: np.ndarray) -> None:
        a.grad += _unbroadcast(da(g), a.value.shape)
        b.grad += _unbroadcast(db(g), b.value.shape)

    return tape._record(value, op, (a, b), backward)


def add(tape: Tape, a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "add")
    return _binary(tape, a, b, "add", a.value + b.value, lambda g: g, lambda g: g)


def sub(tape: Tape, a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "sub")
    return _binary(tape, a, b, "sub", a.value - b.value, lambda g: g, lambda g: -g)


def mul(tape: Tape, a: Node, b: Node) -> Node:
    _check_elementwise(a, b, "mul")
    return _binary(tape, a, b, "mul", a.value * b.value,
                   lambda g: g * b.value, lambda g: g * a.value)


def scale(tape: Tape, a: Node, c: float) -> Node:
    """Multiply by a plain python constant (no gradient for the constant)."""
    c = float(c)

    def backward(g: np.ndarray) -> None:
        a.grad += g * c

    return tape._record(a.value * c, "scale", (a,), backward)


def matmul(tape: Tape, a: Node, b: Node) -> Node:
    """Matrix/vector product for the shape pairs the model uses:
    (m,n)@(n,k), (m,n)@(n,), (n,)@(n,k) and (n,)@(n,) -> scalar."""
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ValueError("matmul: scalar operand")
    if av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    value = av @ bv

    def backward(g: np.ndarray) -> None:
        if av.ndim == 2 and bv.ndim == 2:
            a.grad += g @ bv.T
            b.grad += av.T @ g
        elif av.ndim == 2 and bv.ndim == 1:
            a.grad += np.outer(g, bv)
            b.grad += av.T @ g
        elif av.ndim == 1 and bv.ndim == 2:
            a.grad += bv @ g
            b.grad += np.outer(av, g)
        else:  # both 1-D: inner product
            a.grad += g * bv
            b.grad += g * av

    return tape._record(value, "matmul", (a, b), backward)


def concat(tape: Tape, a: Node, b: Node) -> Node:
    """Concatenate two 1-D nodes."""
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise ValueError("concat: only 1-D nodes")
    na = a.value.shape[0]

    def backward(g: np.ndarray) -> None:
        a.grad += g[:na]
        b.grad += g[na:]

    return tape._record(np.concatenate([a.value, b.value]), "concat", (a, b), backward)


def stack(tape: Tape, parts: Sequence[Node]) -> Node:
    """Stack scalar nodes into a 1-D node."""
    if not parts:
        raise ValueError("stack: empty input")
    for p in parts:
        if p.value.ndim != 0:
            raise ValueError("stack: only scalar nodes")
    parts = tuple(parts)

    def backward(g: np.ndarray) -> None:
        for i, p in enumerate(parts):
            p.grad += g[i]

    value = np.array([p.value for p in parts], dtype=np.float64)
    return tape._record(value, "stack", parts, backward)


def take(tape: Tape, a: Node, i: int) -> Node:
    """Extract element ``i`` of a 1-D node as a scalar node."""
    if a.value.ndim != 1:
        raise ValueError("take: only 1-D nodes")

    def backward(g: np.ndarray) -> None:
        a.grad[i] += g

    return tape._record(np.asarray(a.value[i]), "take", (a,), backward)


def take_row(tape: Tape, a: Node, i: int) -> Node:
    """Extract row ``i`` of a 2-D node as a 1-D node."""
    if a.value.ndim != 2:
        raise ValueError("take_row: only 2-D nodes")

    def backward(g: np.ndarray) -> None:
        a.grad[i] += g

    return tape._record(a.value[i].copy(), "take_row", (a,), backward)


def vsum(tape: Tape, a: Node) -> Node:
    """Sum of all elements, as a scalar node."""

    def backward(g: np.ndarray) -> None:
        a.grad += g

    return tape._record(np.asarray(a.value.sum()), "sum", (a,), backward)


def mean(tape: Tape, a: Node) -> Node:
    n = a.value.size
    if n == 0:
        raise ValueError("mean: empty node")

    def backward(g: np.ndarray) -> None:
        a.grad += g / n

    return tape._record(np.asarray(a.value.mean()), "mean", (a,), backward)


def sigmoid(tape: Tape, a: Node) -> Node:
    x = a.value
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g: np.ndarray) -> None:
        a.grad += g * s * (1.0 - s)

    return tape._record(s, "sigmoid", (a,), backward)


def tanh(tape: Tape, a: Node) -> Node:
    t = np.tanh(a.value)

    def backward(g: np.ndarray) -> None:
        a.grad += g * (1.0 - t * t)

    return tape._record(t, "tanh", (a,), backward)


def log(tape: Tape, a: Node) -> Node:
    """Natural log; rejects non-positive inputs. Loss code that needs a
    guard must clamp first (see :func:`clamp_min`)."""
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive input")
    value = np.log(a.value)

    def backward(g: np.ndarray) -> None:
        a.grad += g / a.value

    return tape._record(value, "log", (a,), backward)


def clamp_min(tape: Tape, a: Node, floor: float) -> Node:
    """max(a, floor); the gradient is passed through only where a > floor."""
    mask = a.value > floor

    def backward(g: np.ndarray) -> None:
        a.grad += g * mask

    return tape._record(np.maximum(a.value, floor), "clamp_min", (a,), backward)


def softplus(tape: Tape, a: Node) -> Node:
    """log(1 + exp(x)), computed stably; the smooth non-negative rectifier."""
    value = np.logaddexp(0.0, a.value)
    sig = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.value))),
                   np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))

    def backward(g: np.ndarray) -> None:
        a.grad += g * sig

    return tape._record(value, "softplus", (a,), backward)


def l1(tape: Tape, a: Node) -> Node:
    """Sum of absolute values; subgradient 0 at exact zeros."""

    def backward(g: np.ndarray) -> None:
        a.grad += g * np.sign(a.value)

    return tape._record(np.asarray(np.abs(a.value).sum()), "l1", (a,), backward)


def cosine_similarity(tape: Tape, a: Node, b: Node) -> Node:
    """Cosine similarity of two 1-D nodes, as a scalar node in [-1, 1]."""
    if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ValueError("cosine_similarity: two 1-D nodes of equal length required")
    na = float(np.linalg.norm(a.value))
    nb = float(np.linalg.norm(b.value))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: zero-norm vector")
    c = float(a.value @ b.value) / (na * nb)

    def backward(g: np.ndarray) -> None:
        a.grad += g * (b.value / (na * nb) - c * a.value / (na * na))
        b.grad += g * (a.value / (na * nb) - c * b.value / (nb * nb))

    return tape._record(np.asarray(c), "cosine", (a, b), backward)


def backward(tape: Tape, loss: Node) -> None:
    """Reverse sweep: fills ``grad`` on every node reachable from ``loss``.

    After the call each leaf's ``grad`` holds the derivative of the scalar
    loss with respect to that leaf.
    """
    if loss.value.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad[...] = 0.0
    loss.grad = np.asarray(1.0)
    for node in reversed(tape.nodes):
        if node._backward is not None:
            node._backward(node.grad)


@dataclass
class GradCheckEntry:
    leaf: int
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of a central-difference gradient check."""

    ok: bool
    n_coords: int
    max_rel_error: float
    failures: list[GradCheckEntry] = field(default_factory=list)


def grad_check(
    f: Callable[..., Node],
    point: np.ndarray | Sequence[np.ndarray],
    eps: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the engine's gradients of ``f`` against central differences.

    ``f(tape, *leaves)`` must build and return a scalar loss node.
    ``point`` is one array or a sequence of arrays, one per leaf. A
    coordinate fails when |analytic - numeric| / max(1, |analytic|,
    |numeric|) exceeds ``tol``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(point, np.ndarray) or np.isscalar(point):
        points = [np.array(point, dtype=np.float64)]
    else:
        points = [np.array(p, dtype=np.float64) for p in point]

    tape = Tape()
    leaves = [tape.leaf(p) for p in points]
    loss = f(tape, *leaves)
    backward(tape, loss)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def value_at(arrays: list[np.ndarray]) -> float:
        t = Tape()
        ls = [t.leaf(a) for a in arrays]
        return float(f(t, *ls).value)

    failures: list[GradCheckEntry] = []
    max_rel = 0.0
    n_coords = 0
    for li, base in enumerate(points):
        flat = base.reshape(-1)
        for idx in range(flat.size):
            n_coords += 1
            bumped = [p.copy() for p in points]
            bumped[li].reshape(-1)[idx] = flat[idx] + eps
            f_plus = value_at(bumped)
            bumped[li].reshape(-1)[idx] = flat[idx] - eps
            f_minus = value_at(bumped)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = float(analytic[li].reshape(-1)[idx])
            rel = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            max_rel = max(max_rel, rel)
            if rel > tol:
                failures.append(GradCheckEntry(li, idx, ana, numeric, rel))
    return GradCheckReport(ok=not failures, n_coords=n_coords,
                           max_rel_error=max_rel, failures=failures)
