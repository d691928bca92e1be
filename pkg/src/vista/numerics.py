"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the model needs are provided, and every primitive checks
its operand shapes explicitly.  There is no implicit broadcasting: adding a
bias row to a matrix is ``add_row``, multiplying by a scalar is ``scale``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "ComputationTape", "ContractError", "DimensionError",
    "tensor", "parameter", "no_grad", "grad_enabled",
    "matmul", "add", "sub", "mul", "scale", "divide", "add_row", "mul_row",
    "transpose", "concat_rows", "concat_cols", "slice_rows", "gather_rows",
    "diagonal", "softmax_rows", "log_softmax_rows", "standardize_rows",
    "l2_normalize_rows", "gelu", "exp", "log", "sum_all", "mean_all",
    "mean_rows", "backward", "grad_check",
]

DTYPE = np.float64


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes do not agree."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward rules (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional float64 array node in the computation graph.

    Leaves created with ``requires_grad=True`` accumulate their total
    derivative in ``grad`` when :func:`backward` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.size == 0:
            raise ContractError("tensors must have at least one element")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _need_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D tensor, got shape {x.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_scalar(x: Tensor) -> bool:
    return x.data.size == 1


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    A, B = a.data, b.data

    def rule(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a Python float or by a one-element tensor."""
    if isinstance(c, Tensor):
        if not _is_scalar(c):
            raise DimensionError(f"scale: factor must have one element, got shape {c.shape}")
        X, cv = x.data, c.data
        s = float(cv.reshape(-1)[0])
        return _result(X * s, (x, c), lambda g: (g * s, np.full(cv.shape, np.sum(g * X))))
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def divide(x: Tensor, c: Tensor) -> Tensor:
    """Divide every entry by a one-element tensor."""
    if not _is_scalar(c):
        raise DimensionError(f"divide: divisor must have one element, got shape {c.shape}")
    X, cv = x.data, c.data
    s = float(cv.reshape(-1)[0])
    out = X / s

    def rule(g):
        return g / s, np.full(cv.shape, -np.sum(g * out) / s)

    return _result(out, (x, c), rule)


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x[n, d] + row[d] applied to every row."""
    _need_2d(x, "add_row")
    if row.shape != (x.shape[1],):
        raise DimensionError(f"add_row: row shape {row.shape} does not match {x.shape}")
    return _result(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=0)))


def mul_row(x: Tensor, row: Tensor) -> Tensor:
    """x[n, d] * row[d] applied to every row."""
    _need_2d(x, "mul_row")
    if row.shape != (x.shape[1],):
        raise DimensionError(f"mul_row: row shape {row.shape} does not match {x.shape}")
    X, R = x.data, row.data
    return _result(X * R, (x, row), lambda g: (g * R, (g * X).sum(axis=0)))


def transpose(x: Tensor) -> Tensor:
    _need_2d(x, "transpose")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along the sequence (row) axis."""
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    for p in parts:
        _need_2d(p, "concat_rows")
        if p.shape[1] != parts[0].shape[1]:
            raise DimensionError(f"concat_rows: widths {parts[0].shape} and {p.shape} differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def rule(g):
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Join 2-D tensors side by side (used to merge attention heads)."""
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    for p in parts:
        _need_2d(p, "concat_cols")
        if p.shape[0] != parts[0].shape[0]:
            raise DimensionError(f"concat_cols: heights {parts[0].shape} and {p.shape} differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), rule)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2-D tensor."""
    _need_2d(x, "slice_rows")
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), rule)


def gather_rows(table: Tensor, index: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of ``table`` picked by integer index."""
    _need_2d(table, "gather_rows")
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("gather_rows needs a non-empty 1-D index")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise DimensionError(f"gather_rows: index out of range for table {table.shape}")
    shape = table.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], (table,), rule)


def diagonal(x: Tensor) -> Tensor:
    _need_2d(x, "diagonal")
    if x.shape[0] != x.shape[1]:
        raise DimensionError(f"diagonal needs a square matrix, got {x.shape}")
    return _result(np.diag(x.data).copy(), (x,), lambda g: (np.diag(g),))


# ---------------------------------------------------------------------------
# row-wise nonlinear maps
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    _need_2d(x, "softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), rule)


def log_softmax_rows(x: Tensor) -> Tensor:
    _need_2d(x, "log_softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def rule(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), rule)


def standardize_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) per row; the statistics half of layer norm."""
    _need_2d(x, "standardize_rows")
    d = x.shape[1]
    if d < 2:
        raise ContractError("standardize_rows needs rows of width >= 2")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def rule(g):
        return (inv * (g - g.mean(axis=1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=1, keepdims=True)),)

    return _result(xhat, (x,), rule)


def l2_normalize_rows(x: Tensor) -> Tensor:
    _need_2d(x, "l2_normalize_rows")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norm == 0.0):
        raise ContractError("l2_normalize_rows: zero row cannot be normalized")
    y = x.data / norm

    def rule(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _result(y, (x,), rule)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    X = x.data
    u = _GELU_C * (X + 0.044715 * X ** 3)
    th = np.tanh(u)
    out = 0.5 * X * (1.0 + th)

    def rule(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * X * X)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th * th) * du),)

    return _result(out, (x,), rule)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ContractError("log of a non-positive entry")
    X = x.data
    return _result(np.log(X), (x,), lambda g: (g / X,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def mean_rows(x: Tensor) -> Tensor:
    """Average over the sequence axis, keeping a [1, d] row."""
    _need_2d(x, "mean_rows")
    n = x.shape[0]
    return _result(x.data.mean(axis=0, keepdims=True), (x,),
                   lambda g: (np.repeat(g / n, n, axis=0),))


# ---------------------------------------------------------------------------
# tape and backward pass
# ---------------------------------------------------------------------------

class ComputationTape:
    """Primitive applications reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> ComputationTape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: ComputationTape | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each leaf that received a gradient to that gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if tape is None:
        tape = ComputationTape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[id(node)] = node
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
    for leaf in leaves.values():
        if not np.all(np.isfinite(leaf.grad)):
            raise FloatingPointError(f"non-finite gradient for {leaf!r}")
    return {leaf: leaf.grad for leaf in leaves.values()}


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor] | Mapping[str, Tensor],
               eps: float = 1e-5) -> float:
    """Largest relative disagreement between backward and central differences.

    ``f`` is called with no arguments and must read the current values of
    ``params``; it is re-evaluated with each coordinate nudged by ``eps``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"eps={eps} outside [1e-6, 1e-3]")
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    with no_grad():
        first, second = f().item(), f().item()
    if first != second:
        raise ContractError("f is not deterministic: repeated calls disagree")
    for p in plist:
        p.zero_grad()
    backward(f())
    worst = 0.0
    with no_grad():
        for p in plist:
            analytic = np.zeros(p.shape) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            a_flat = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + abs(numeric) + 1e-12)
                worst = max(worst, err)
    return worst
