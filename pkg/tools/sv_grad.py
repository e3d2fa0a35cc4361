# =========================================
# file: tools/sv_grad.py
# =========================================
"""
Minimal reverse-mode differentiation over dense float64 arrays.

A Node holds a value, a lazily materialized gradient, its parents and the
local vector-Jacobian product. Graphs are built fresh for every training
step; backward() walks them once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

VAR_EPS = 1e-8

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Tuple["Node", ...] = (),
        backward_rule: Optional[BackwardRule] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"


Operand = Union[Node, np.ndarray, float, int]


def leaf(value, name: Optional[str] = None) -> Node:
    """A trainable input. The array is copied so callers can keep mutating theirs."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def lift(x: Operand) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _result(value: np.ndarray, parents: Tuple[Node, ...], rule: BackwardRule) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents=parents, backward_rule=rule, requires_grad=True)
    return Node(value)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes must match, got {a.shape} and {b.shape}")


def _check_ndim(op: str, x: Node, ndim: int) -> None:
    if x.value.ndim != ndim:
        raise ShapeError(f"{op}: expected a {ndim}-d operand, got shape {x.shape}")


# -------------------------
# Elementwise
# -------------------------
def add(a: Operand, b: Operand) -> Node:
    """Broadcasting addition."""
    a, b = lift(a), lift(b)
    _check_broadcast("add", a, b)
    return _result(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Node:
    a, b = lift(a), lift(b)
    _check_broadcast("sub", a, b)
    return _result(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Node:
    """Elementwise product of equally shaped operands."""
    a, b = lift(a), lift(b)
    _check_same("mul", a, b)
    return _result(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def bmul(a: Operand, b: Operand) -> Node:
    """Broadcasting product, e.g. a weight matrix scaled per output column."""
    a, b = lift(a), lift(b)
    _check_broadcast("bmul", a, b)
    return _result(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a: Operand, b: Operand) -> Node:
    a, b = lift(a), lift(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
    )


def scale(a: Operand, c: float) -> Node:
    a = lift(a)
    c = float(c)
    return _result(a.value * c, (a,), lambda g: (g * c,))


def neg(a: Operand) -> Node:
    a = lift(a)
    return _result(-a.value, (a,), lambda g: (-g,))


def relu(a: Operand) -> Node:
    # gradient at exactly 0 is 0
    a = lift(a)
    mask = a.value > 0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a: Operand) -> Node:
    a = lift(a)
    out = np.sqrt(a.value)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def log(a: Operand) -> Node:
    a = lift(a)
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def exp(a: Operand) -> Node:
    a = lift(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


# -------------------------
# Linear algebra / reshaping
# -------------------------
def matmul(a: Operand, b: Operand) -> Node:
    a, b = lift(a), lift(b)
    _check_ndim("matmul", a, 2)
    _check_ndim("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, got {a.shape} and {b.shape}")
    return _result(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a: Operand) -> Node:
    a = lift(a)
    _check_ndim("transpose", a, 2)
    return _result(a.value.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Operand, shape: Tuple[int, ...]) -> Node:
    a = lift(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def concat(nodes: Sequence[Operand], axis: int = 0) -> Node:
    parts = [lift(n) for n in nodes]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        shapes = [p.shape for p in parts]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(a: Operand, rows: Sequence[int]) -> Node:
    a = lift(a)
    idx = np.asarray(rows, dtype=np.int64)

    def rule(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.value[idx], (a,), rule)


def pick(a: Operand, cols: Sequence[int]) -> Node:
    """Row i of a 2-d operand contributes its entry at column cols[i]."""
    a = lift(a)
    _check_ndim("pick", a, 2)
    idx = np.asarray(cols, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: need one column per row of {a.shape}, got {idx.shape}")
    rows = np.arange(a.shape[0])

    def rule(g):
        full = np.zeros_like(a.value)
        full[rows, idx] = g
        return (full,)

    return _result(a.value[rows, idx], (a,), rule)


# -------------------------
# Reductions
# -------------------------
def sum_all(a: Operand) -> Node:
    a = lift(a)
    return _result(np.asarray(a.value.sum()), (a,), lambda g: (np.full_like(a.value, float(g)),))


def mean_all(a: Operand) -> Node:
    a = lift(a)
    n = a.value.size
    return _result(
        np.asarray(a.value.sum() / n), (a,), lambda g: (np.full_like(a.value, float(g) / n),)
    )


def _segments(op: str, x: Node, lengths: Optional[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    _check_ndim(op, x, 2)
    if lengths is None:
        lengths = [x.shape[0]]
    lens = np.asarray(lengths, dtype=np.int64)
    if lens.size == 0 or np.any(lens < 1) or int(lens.sum()) != x.shape[0]:
        raise ShapeError(f"{op}: segment lengths {list(lens)} do not tile {x.shape[0]} frames")
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    return lens, starts


def time_mean(x: Operand, lengths: Optional[Sequence[int]] = None) -> Node:
    """Per-segment mean over the time (row) axis: (sum T, d) -> (segments, d)."""
    x = lift(x)
    lens, starts = _segments("time_mean", x, lengths)
    out = np.add.reduceat(x.value, starts, axis=0) / lens[:, None]
    return _result(out, (x,), lambda g: (np.repeat(g / lens[:, None], lens, axis=0),))


def time_var(x: Operand, lengths: Optional[Sequence[int]] = None) -> Node:
    """Per-segment biased (1/T) variance over the time axis."""
    x = lift(x)
    lens, starts = _segments("time_var", x, lengths)
    mu = np.add.reduceat(x.value, starts, axis=0) / lens[:, None]
    centered = x.value - np.repeat(mu, lens, axis=0)
    out = np.add.reduceat(centered * centered, starts, axis=0) / lens[:, None]
    return _result(
        out, (x,), lambda g: (2.0 * centered * np.repeat(g / lens[:, None], lens, axis=0),)
    )


def l2_norm(a: Operand) -> Node:
    """Euclidean norm along the last axis, kept as a trailing unit axis."""
    a = lift(a)
    out = np.sqrt((a.value * a.value).sum(axis=-1, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    return _result(out, (a,), lambda g: (np.where(out > 0, g * a.value / safe, 0.0),))


def softmax(a: Operand) -> Node:
    a = lift(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Operand) -> Node:
    """log(softmax(a)) along the last axis as a log-sum-exp difference."""
    a = lift(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _result(out, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


# -------------------------
# Pairwise geometry
# -------------------------
def sq_euclidean(a: Operand, b: Operand) -> Node:
    """Pairwise squared distances between rows: (m, D), (n, D) -> (m, n)."""
    a, b = lift(a), lift(b)
    _check_ndim("sq_euclidean", a, 2)
    _check_ndim("sq_euclidean", b, 2)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sq_euclidean: row widths differ, got {a.shape} and {b.shape}")
    diff = a.value[:, None, :] - b.value[None, :, :]
    out = (diff * diff).sum(axis=-1)

    def rule(g):
        weighted = 2.0 * g[:, :, None] * diff
        return weighted.sum(axis=1), -weighted.sum(axis=0)

    return _result(out, (a, b), rule)


def normalize_rows(a: Operand) -> Node:
    return div(a, l2_norm(a))


def cosine_similarity(a: Operand, b: Operand) -> Node:
    """Pairwise cosine similarity between rows: (m, D), (n, D) -> (m, n)."""
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity: need (m, D) and (n, D), got {a.shape} and {b.shape}")
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


# -------------------------
# Backward
# -------------------------
def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    seen = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, leaves: Optional[Iterable[Node]] = None) -> List[np.ndarray]:
    """
    Propagate d(root)/d(node) to every node upstream of a scalar root.

    Gradients from an earlier call on the same graph are overwritten, not
    accumulated. Returns the gradients of `leaves` in order; leaves that the
    root does not reach get zeros.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")

    order = _topological_order(root) if root.requires_grad else []
    for node in order:
        node.grad = None

    if order:
        root.grad = np.ones_like(root.value)
        for node in reversed(order):
            if node.grad is None or node.backward_rule is None:
                continue
            for parent, g in zip(node.parents, node.backward_rule(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64).reshape(parent.shape)
                parent.grad = g if parent.grad is None else parent.grad + g

    if leaves is None:
        return []
    reached = {id(n) for n in order}
    out = []
    for lf in leaves:
        if lf.grad is None or id(lf) not in reached:
            lf.grad = np.zeros_like(lf.value)
        out.append(lf.grad)
    return out


# -------------------------
# Finite-difference verification
# -------------------------
@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    max_rel_error: Dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _scalar_of(out) -> float:
    if isinstance(out, Node):
        if out.value.size != 1:
            raise ShapeError(f"finite_difference_check: f must be scalar, got shape {out.shape}")
        return out.item()
    return float(out)


def finite_difference_check(
    f: Callable[[Mapping[str, Node]], Operand],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-4,
    name: str = "f",
) -> GradCheckReport:
    """
    Compare backward() against central differences for every coordinate.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: leaf(v, name=k) for k, v in base.items()}
    root = f(leaves)
    if isinstance(root, Node) and root.value.size != 1:
        raise ShapeError(f"finite_difference_check: f must be scalar, got shape {root.shape}")
    if isinstance(root, Node):
        analytic = dict(zip(leaves, backward(root, leaves.values())))
    else:
        analytic = {k: np.zeros_like(v) for k, v in base.items()}

    report = GradCheckReport(name=name, tolerance=tolerance)
    for key, value in base.items():
        worst = 0.0
        flat = value.reshape(-1)
        grad = analytic[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = _scalar_of(f({k: constant(v) for k, v in base.items()}))
            flat[i] = orig - step
            minus = _scalar_of(f({k: constant(v) for k, v in base.items()}))
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * step)
            err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), floor)
            worst = max(worst, err)
        report.max_rel_error[key] = worst
    return report
