"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation returns a fresh ``Tensor`` whose ``op_record`` remembers its
parents and a vector-Jacobian closure.  ``backward`` walks the tape in reverse
topological order and accumulates gradients additively, so calling it twice
doubles every gradient; callers reset with ``zero_grads`` between optimizer
steps.  Values are treated as immutable once a node is created (the optimizer
rebinds leaf ``values`` rather than mutating them in place), which keeps
independent graphs safe to evaluate on independent threads.

Only the rank patterns the losses need are supported: rank-2 matrices,
rank-1 vectors and 0-d scalars.  There is no general broadcasting, GPU path,
or mixed precision.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

EPSILON = 1e-12


class ShapeMismatchError(ValueError):
    """Operands have non-conformable shapes."""


class NumericDomainError(ValueError):
    """An input lies outside an operation's numeric domain."""


class GraphContractError(ValueError):
    """A differentiation contract was violated (e.g. non-scalar loss)."""


class OpRecord:
    """Provenance of a computed tensor: parent nodes plus the local VJP."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple["Tensor", ...],
                 vjp: Callable[[np.ndarray], tuple]):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """A float64 array node in the computation graph.

    ``grad`` is lazily allocated by ``backward``.  A detached tensor has no
    ``op_record`` and never receives gradient.
    """

    __slots__ = ("values", "grad", "requires_grad", "op_record")

    def __init__(self, values, requires_grad: bool = False,
                 op_record: OpRecord | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op_record = op_record

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphContractError(
                f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar over the module-level ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Leaf node constructor."""
    return Tensor(values, requires_grad=requires_grad)


def detach(x: Tensor) -> Tensor:
    """Same values, no provenance; gradients never flow through the result."""
    return x.detach()


def _needs_grad(*parents: Tensor) -> bool:
    return any(p.requires_grad for p in parents)


def _result(op: str, values: np.ndarray, parents: tuple[Tensor, ...],
            vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(values, requires_grad=True,
                      op_record=OpRecord(op, parents, vjp))
    return Tensor(values)


# ---------------------------------------------------------------- linear ops

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a rank-1 bias added to every matrix row."""
    broadcast_bias = (a.values.ndim == 2 and b.values.ndim == 1
                      and a.shape[1] == b.shape[0])
    if not broadcast_bias and a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape}")
    out = a.values + b.values

    def vjp(g):
        gb = g.sum(axis=0) if broadcast_bias else g
        return g, gb

    return _result("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g, -g

    return _result("sub", a.values - b.values, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python-float constant."""
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _result("scale", a.values * c, (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g * b.values, g * a.values

    return _result("mul", a.values * b.values, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Divide by a same-shape tensor or by a single-element tensor."""
    if b.values.size != 1 and a.shape != b.shape:
        raise ShapeMismatchError(f"div: shapes {a.shape} and {b.shape}")
    out = a.values / b.values

    def vjp(g):
        ga = g / b.values
        gb = -(g * a.values) / (b.values ** 2)
        if b.values.size == 1:
            gb = np.asarray(gb.sum()).reshape(b.shape)
        return ga, gb

    return _result("div", out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeMismatchError(
            f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g @ b.values.T, a.values.T @ g

    return _result("matmul", a.values @ b.values, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"transpose needs rank-2, got {a.shape}")

    def vjp(g):
        return (g.T,)

    return _result("transpose", a.values.T.copy(), (a,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors with equal column counts along axis 0."""
    parts = tuple(parts)
    if not parts:
        raise ShapeMismatchError("concat_rows: empty input")
    cols = {p.shape[1] if p.values.ndim == 2 else None for p in parts}
    if None in cols or len(cols) != 1:
        raise ShapeMismatchError(
            f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.values for p in parts], axis=0)

    def vjp(g):
        grads = []
        start = 0
        for n in sizes:
            grads.append(g[start:start + n])
            start += n
        return tuple(grads)

    return _result("concat_rows", out, parts, vjp)


# ------------------------------------------------------------- nonlinear ops

def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def vjp(g):
        return (g * mask,)

    return _result("relu", np.where(mask, x.values, 0.0), (x,), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def vjp(g):
        return (g * out,)

    return _result("exp", out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    """Natural log with a 1e-12 floor; genuinely negative input is an error."""
    if np.any(x.values < -EPSILON):
        raise NumericDomainError(
            f"log: input has negative entries (min {x.values.min():.3g})")
    clamped = np.maximum(x.values, EPSILON)

    def vjp(g):
        return (np.where(x.values > EPSILON, g / clamped, 0.0),)

    return _result("log", np.log(clamped), (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor (numerically stabilized)."""
    if x.values.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows needs rank-2, got {x.shape}")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax_rows", out, (x,), vjp)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d scalar tensor."""
    def vjp(g):
        return (np.full_like(x.values, float(g)),)

    return _result("sum", np.asarray(x.values.sum()), (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.values.size

    def vjp(g):
        return (np.full_like(x.values, float(g) / n),)

    return _result("mean", np.asarray(x.values.mean()), (x,), vjp)


def row_sum(x: Tensor) -> Tensor:
    """Per-row sums of a rank-2 tensor, shape (m, 1)."""
    if x.values.ndim != 2:
        raise ShapeMismatchError(f"row_sum needs rank-2, got {x.shape}")

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("row_sum", x.values.sum(axis=1, keepdims=True), (x,), vjp)


def col_sum(x: Tensor) -> Tensor:
    """Per-column sums of a rank-2 tensor, shape (1, n)."""
    if x.values.ndim != 2:
        raise ShapeMismatchError(f"col_sum needs rank-2, got {x.shape}")

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("col_sum", x.values.sum(axis=0, keepdims=True), (x,), vjp)


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values, as a scalar."""
    def vjp(g):
        return (float(g) * np.sign(x.values),)

    return _result("l1_norm", np.asarray(np.abs(x.values).sum()), (x,), vjp)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm with a 1e-12 guard inside the square root."""
    s = float(np.sqrt((x.values ** 2).sum() + EPSILON))

    def vjp(g):
        return (float(g) * x.values / s,)

    return _result("l2_norm", np.asarray(s), (x,), vjp)


def row_normalize(x: Tensor) -> Tensor:
    """Scale each row (or a rank-1 vector) to unit Euclidean length.

    The norm carries the 1e-12 guard, so zero rows map to zero rather than
    failing.
    """
    if x.values.ndim == 1:
        norms = np.sqrt((x.values ** 2).sum() + EPSILON)
    elif x.values.ndim == 2:
        norms = np.sqrt((x.values ** 2).sum(axis=1, keepdims=True) + EPSILON)
    else:
        raise ShapeMismatchError(f"row_normalize needs rank 1 or 2, got {x.shape}")
    out = x.values / norms

    def vjp(g):
        if x.values.ndim == 1:
            dot = (g * x.values).sum()
        else:
            dot = (g * x.values).sum(axis=1, keepdims=True)
        return (g / norms - x.values * dot / norms ** 3,)

    return _result("row_normalize", out, (x,), vjp)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, as a differentiable scalar in [-1, 1]."""
    if u.values.ndim != 1 or v.values.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatchError(
            f"cosine_sim needs equal-length vectors, got {u.shape} and {v.shape}")
    return tensor_sum(mul(row_normalize(u), row_normalize(v)))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All pairwise cosine similarities between rows of `a` and rows of `b`."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"cosine_matrix: shapes {a.shape} and {b.shape}")
    return matmul(row_normalize(a), transpose(row_normalize(b)))


# ----------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
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
        if node.op_record is not None:
            for parent in node.op_record.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor that requires gradient.

    Each call computes the full gradient of this loss and adds it to any
    gradient already stored, so fan-out within one call and repeated calls
    both accumulate additively.
    """
    if loss.values.size != 1:
        raise GraphContractError(
            f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    incoming: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = incoming.get(id(node))
        if g is None or node.op_record is None:
            continue
        rec = node.op_record
        for parent, pg in zip(rec.parents, rec.vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in incoming:
                incoming[key] = incoming[key] + pg
            else:
                incoming[key] = np.array(pg, dtype=np.float64)
    for node in order:
        g = incoming.get(id(node))
        if g is not None and node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    leaf = Tensor(x.values, requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)

    flat = x.values.ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        hi = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] -= 2 * step
        lo = f(Tensor(bumped.reshape(x.shape))).item()
        numeric = (hi - lo) / (2 * step)
        a = analytic.ravel()[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
