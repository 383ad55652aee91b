"""Dense matrix values with define-by-run reverse-mode differentiation.

Every value is a 2-D float64 array wrapped in a :class:`Tensor`. Operations
record their parents and a local adjoint rule, and :func:`backward` walks the
recorded graph from a scalar root in reverse creation order.

Broadcasting is limited to the second operand of ``add``/``sub``/``mul`` being
a row vector ``(1, c)``, a column vector ``(r, 1)`` or a scalar ``(1, 1)``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

LOG_CLAMP = 1e-12

_ids = itertools.count()


class TapeError(ValueError):
    """Shape or usage error while recording an operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def as_matrix(value, name: str = "value") -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise TapeError(f"{name}: expected at most 2 dimensions, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: non-finite entries")
    return arr


class Tensor:
    """A node on the tape: forward payload, op tag and parents."""

    __slots__ = ("id", "value", "op", "parents", "requires_grad", "_adjoint", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), adjoint: Callable | None = None, _checked: bool = False):
        self.value = value if _checked else as_matrix(value)
        self.value.setflags(write=False)
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._adjoint = adjoint

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise TapeError(f"item() needs a 1x1 value, got {self.value.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, id={self.id})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    @property
    def T(self):
        return transpose(self)


def param(value) -> Tensor:
    """Leaf that receives an adjoint."""
    return Tensor(value, requires_grad=True)


def const(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, value: np.ndarray, parents: Sequence[Tensor], adjoint) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: non-finite result")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op, _checked=True)
    return Tensor(value, requires_grad=True, op=op, parents=tuple(parents),
                  adjoint=adjoint, _checked=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    ra, ca = a.shape
    rb, cb = b.shape
    if (rb in (1, ra)) and (cb in (1, ca)):
        return
    if (ra in (1, rb)) and (ca in (1, cb)):
        return
    raise TapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    _check_broadcast("add", a, b)
    out = a.value + b.value
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    _check_broadcast("sub", a, b)
    out = a.value - b.value
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = const(a), const(b)
    _check_broadcast("mul_elementwise", a, b)
    av, bv = a.value, b.value
    return _record("mul_elementwise", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    if a.shape[1] != b.shape[0]:
        raise TapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = const(a)
    return _record("transpose", np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,))


def scalar_mul(a, c: float) -> Tensor:
    a = const(a)
    c = float(c)
    return _record("scalar_mul", a.value * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    a = const(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = const(a)
    av = a.value
    return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def relu(a) -> Tensor:
    a = const(a)
    mask = a.value > 0.0
    return _record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = const(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax_rows(a) -> Tensor:
    a = const(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def adjoint(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", p, (a,), adjoint)


def log(a) -> Tensor:
    """Natural log with inputs clamped below at ``LOG_CLAMP``."""
    a = const(a)
    x = a.value
    live = x > LOG_CLAMP
    safe = np.where(live, x, LOG_CLAMP)
    return _record("log", np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def exp(a) -> Tensor:
    a = const(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = const(a)
    shape = a.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
    elif axis in (0, 1):
        out = a.value.sum(axis=axis, keepdims=True)
    else:
        raise TapeError(f"sum: bad axis {axis}")
    return _record("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = const(a)
    shape = a.shape
    if axis is None:
        count = shape[0] * shape[1]
        out = np.array([[a.value.mean()]])
    elif axis in (0, 1):
        count = shape[axis]
        out = a.value.mean(axis=axis, keepdims=True)
    else:
        raise TapeError(f"mean: bad axis {axis}")
    if count == 0:
        raise TapeError("mean of an empty matrix")
    return _record("mean", out, (a,), lambda g: (np.broadcast_to(g / count, shape).copy(),))


def concat_cols(parts: Sequence) -> Tensor:
    parts = [const(p) for p in parts]
    if not parts:
        raise TapeError("concat_cols: nothing to concatenate")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise TapeError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.value for p in parts], axis=1)
    return _record("concat_cols", out, parts,
                   lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def slice_rows(a, index) -> Tensor:
    """Gather rows by integer index array (repeats allowed) or slice."""
    a = const(a)
    idx = np.arange(a.shape[0])[index] if isinstance(index, slice) else np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise TapeError("slice_rows: index must be one-dimensional")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise TapeError("slice_rows: index out of range")
    shape = a.shape
    idx = idx % shape[0] if idx.size else idx

    def adjoint(g):
        if np.unique(idx).size == idx.size:
            full = np.zeros(shape)
            full[idx] = g
            return (full,)
        # repeated rows: scatter-add as a sparse product, much faster than np.add.at
        scatter = sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(shape[0], idx.size))
        return (np.asarray(scatter @ g),)

    return _record("slice_rows", a.value[idx], (a,), adjoint)


def max_pool_rows(a) -> Tensor:
    """Columnwise max; the adjoint goes to the first maximising row."""
    a = const(a)
    if a.shape[0] == 0:
        raise TapeError("max_pool_rows: empty matrix")
    arg = a.value.argmax(axis=0)
    cols = np.arange(a.shape[1])
    shape = a.shape

    def adjoint(g):
        full = np.zeros(shape)
        full[arg, cols] = g[0]
        return (full,)

    return _record("max_pool_rows", a.value[arg, cols][None, :], (a,), adjoint)


def mean_pool_rows(a) -> Tensor:
    a = const(a)
    if a.shape[0] == 0:
        raise TapeError("mean_pool_rows: empty matrix")
    n = a.shape[0]
    shape = a.shape
    return _record("mean_pool_rows", a.value.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).copy(),))


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "matmul": matmul,
    "transpose": transpose,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_rows": softmax_rows,
    "log": log,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "concat_cols": concat_cols,
    "slice_rows": slice_rows,
    "max_pool_rows": max_pool_rows,
    "mean_pool_rows": mean_pool_rows,
    "square": square,
    "neg": neg,
}


def primitive(op_tag: str, inputs: Sequence, *constants) -> Tensor:
    """Record ``op_tag`` applied to ``inputs`` (plus non-differentiable constants)."""
    try:
        fn = PRIMITIVES[op_tag]
    except KeyError:
        raise TapeError(f"unknown primitive {op_tag!r}") from None
    if op_tag == "concat_cols":
        return fn(list(inputs))
    return fn(*inputs, *constants)


# ---------------------------------------------------------------------------
# composites used across the package
# ---------------------------------------------------------------------------

def custom_op(op: str, value: np.ndarray, inputs: Sequence, adjoint: Callable) -> Tensor:
    """Record an operation computed outside the tape. ``adjoint(g)`` returns one
    gradient per input, each shaped like that input."""
    inputs = tuple(const(x) for x in inputs)
    return _record(op, as_matrix(value, op), inputs, adjoint)


def softplus(a) -> Tensor:
    return log(add(exp(a), 1.0))


def row_sq_norms(a) -> Tensor:
    return sum(square(a), axis=1)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class GradStore:
    """Adjoints keyed by tensor id; untouched tensors read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray], shapes: dict[int, tuple[int, int]]):
        self._grads = grads
        self._shapes = shapes

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.id)
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def _ancestors(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    # ids increase with creation, so descending id is a reverse topological order
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(root: Tensor) -> GradStore:
    if root.shape != (1, 1):
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    shapes: dict[int, tuple[int, int]] = {}
    if not root.requires_grad:
        return GradStore(grads, shapes)
    grads[root.id] = np.ones((1, 1))
    for node in _ancestors(root):
        g = grads.get(node.id)
        shapes[node.id] = node.shape
        if g is None or node._adjoint is None:
            continue
        for parent, pg in zip(node.parents, node._adjoint(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    return GradStore(grads, shapes)


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    store = backward(root)
    return [store[t] for t in wrt]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = as_matrix(x).copy()
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x.copy()))
        x[idx] = orig - h
        fm = float(f(x.copy()))
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at index {idx}")
        out[idx] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius-norm relative discrepancy between two gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
