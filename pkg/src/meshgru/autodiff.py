"""Minimal reverse-mode automatic differentiation over f64 arrays.

A :class:`Tape` is activated as a context manager; primitives executed
inside it record adjoint closures in construction (topological) order.
With no active tape the same primitives run as plain numpy, which is the
no-grad inference path.  One tape has one owner thread.
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp

from .errors import DataValidationError
from .mesh_graph import ScaledLaplacian

_ACTIVE = threading.local()


class Tensor:
    """Dense f64 value with an optional gradient buffer."""

    __slots__ = ("value", "grad", "needs_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.needs_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def grad_value(self) -> np.ndarray:
        """Gradient, with zeros for tensors the loss never reached."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, needs_grad={self.needs_grad})"


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


class Tape:
    """Append-only record of adjoint closures, replayed in reverse."""

    def __init__(self):
        self.ops: list = []

    def __enter__(self) -> "Tape":
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = _ACTIVE.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.stack.pop()

    def __len__(self) -> int:
        return len(self.ops)


def _active_tape() -> Tape | None:
    stack = getattr(_ACTIVE, "stack", None)
    return stack[-1] if stack else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, adjoint) -> None:
    """Attach an adjoint closure if grads are needed and a tape is live."""
    tape = _active_tape()
    if tape is None or not out.needs_grad:
        out.needs_grad = False
        return

    def op():
        if out.grad is not None:
            adjoint(out.grad)

    tape.ops.append(op)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.value.shape != ():
        raise DataValidationError(f"loss must be scalar, got shape {loss.value.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for op in reversed(tape.ops):
        op()


# ---------------------------------------------------------------------------
# primitives


def _broadcast_adjoint(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient g down to `shape` after forward broadcasting."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    extra = g.ndim - len(shape)
    if extra < 0:
        raise DataValidationError("unsupported broadcast in adjoint")
    g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        raise DataValidationError("unsupported broadcast in adjoint")
    return g


def _elementwise_pair(a, b, fwd, da, db) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        value = fwd(a.value, b.value)
    except ValueError as exc:
        raise DataValidationError(f"shape mismatch: {a.shape} vs {b.shape}") from exc
    out = Tensor(value)
    out.needs_grad = a.needs_grad or b.needs_grad

    def adjoint(g):
        if a.needs_grad:
            a.accumulate(_broadcast_adjoint(da(g, a.value, b.value), a.shape))
        if b.needs_grad:
            b.accumulate(_broadcast_adjoint(db(g, a.value, b.value), b.shape))

    _record(out, adjoint)
    return out


def add(a, b) -> Tensor:
    return _elementwise_pair(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _elementwise_pair(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _elementwise_pair(
        a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def _elementwise_unary(a, fwd, dfwd) -> Tensor:
    a = _wrap(a)
    value = fwd(a.value)
    out = Tensor(value)
    out.needs_grad = a.needs_grad

    def adjoint(g):
        a.accumulate(g * dfwd(a.value, value))

    _record(out, adjoint)
    return out


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _elementwise_unary(a, fwd, lambda x, y: y * (1.0 - y))


def tanh(a) -> Tensor:
    return _elementwise_unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def relu(a) -> Tensor:
    return _elementwise_unary(
        a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)
    )


def softplus(a) -> Tensor:
    def dfwd(x, y):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return s

    return _elementwise_unary(a, lambda x: np.logaddexp(0.0, x), dfwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DataValidationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value)
    out.needs_grad = a.needs_grad or b.needs_grad

    def adjoint(g):
        if a.needs_grad:
            a.accumulate(g @ b.value.T)
        if b.needs_grad:
            b.accumulate(a.value.T @ g)

    _record(out, adjoint)
    return out


def sparse_dense_matmul(mat: ScaledLaplacian | sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    x = _wrap(x)
    if isinstance(mat, ScaledLaplacian):
        fwd_mat, adj_mat = mat.matrix, mat.matrix_t
    else:
        fwd_mat = mat.tocsr()
        adj_mat = fwd_mat.T.tocsr()
    if x.value.ndim != 2 or fwd_mat.shape[1] != x.shape[0]:
        raise DataValidationError(
            f"sparse matmul shape mismatch: {fwd_mat.shape} @ {x.shape}"
        )
    out = Tensor(fwd_mat @ x.value)
    out.needs_grad = x.needs_grad

    def adjoint(g):
        x.accumulate(adj_mat @ g)

    _record(out, adjoint)
    return out


def concat_columns(parts: list) -> Tensor:
    tensors = [_wrap(p) for p in parts]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1 or any(t.value.ndim != 2 for t in tensors):
        raise DataValidationError("concat_columns needs 2-D blocks with equal rows")
    out = Tensor(np.concatenate([t.value for t in tensors], axis=1))
    out.needs_grad = any(t.needs_grad for t in tensors)

    def adjoint(g):
        col = 0
        for t in tensors:
            width = t.shape[1]
            if t.needs_grad:
                t.accumulate(g[:, col : col + width])
            col += width

    _record(out, adjoint)
    return out


def row_gather(x, indices: np.ndarray) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DataValidationError("row_gather needs a flat index array")
    out = Tensor(x.value[idx])
    out.needs_grad = x.needs_grad

    def adjoint(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        x.accumulate(gx)

    _record(out, adjoint)
    return out


def scatter_mean(src, indices: np.ndarray, n_out: int) -> Tensor:
    """Group rows of ``src`` by index and average each group.

    Every output slot must receive at least one row (an empty mean is
    undefined; callers hit this as the orphan-node / empty-pool error).
    """
    src = _wrap(src)
    idx = np.asarray(indices, dtype=np.int64)
    counts = np.bincount(idx, minlength=n_out).astype(np.float64)
    if np.any(counts == 0):
        raise DataValidationError("scatter_mean group with no members")
    summed = np.zeros((n_out,) + src.shape[1:], dtype=np.float64)
    np.add.at(summed, idx, src.value)
    scale = counts.reshape((-1,) + (1,) * (src.value.ndim - 1))
    out = Tensor(summed / scale)
    out.needs_grad = src.needs_grad

    def adjoint(g):
        src.accumulate((g / scale)[idx])

    _record(out, adjoint)
    return out


def mean_all(x) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value.mean())
    out.needs_grad = x.needs_grad

    def adjoint(g):
        x.accumulate(np.full_like(x.value, g / x.value.size))

    _record(out, adjoint)
    return out


def mse(pred, target, weight: np.ndarray | None = None) -> Tensor:
    """Mean squared error, or a weighted sum of squares when ``weight``
    is given (weights are applied elementwise, no further averaging)."""
    pred = _wrap(pred)
    tgt = np.asarray(target, dtype=np.float64)
    if tgt.shape != pred.shape:
        raise DataValidationError(f"mse shape mismatch: {pred.shape} vs {tgt.shape}")
    diff = pred.value - tgt
    if weight is None:
        out = Tensor(np.mean(diff * diff))
    else:
        out = Tensor(np.sum(weight * diff * diff))
    out.needs_grad = pred.needs_grad

    def adjoint(g):
        if weight is None:
            pred.accumulate(g * 2.0 * diff / diff.size)
        else:
            pred.accumulate(g * 2.0 * weight * diff)

    _record(out, adjoint)
    return out
