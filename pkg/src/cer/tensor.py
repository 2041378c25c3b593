"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which is how inference runs::

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)

Broadcasting is limited to what the recommender graph needs: a second operand
whose shape is a suffix of the first (biases, layer-norm scales, positional
embeddings).
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from cer import kernels

# additive mask value for forbidden attention positions; finite on purpose
FORBIDDEN = -1e9

CHECK_FINITE = True

_local = threading.local()


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op = None

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
        return self._op is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Op:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; replays backward rules in reverse."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def reset(self) -> None:
        self.ops = []
        self.consumed = False

    def record(self, inputs, output, backward) -> None:
        op = _Op(inputs, output, backward)
        output._op = op
        self.ops.append(op)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward already called on this tape; reset it first")
        if not self.ops:
            raise TapeError("backward on an empty tape")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._op is None or not any(op is loss._op for op in self.ops):
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            for t in op.inputs:
                if t.requires_grad and t._op is None:
                    leaves[id(t)] = t
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that produced it."""
    tape = current_tape()
    if tape is None:
        raise TapeError("backward called outside of an active tape")
    tape.backward(loss)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("operation produced non-finite values")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(tuple(inputs), out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_suffix(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        da = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        db = None
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                db = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                db = np.swapaxes(A, -1, -2) @ g
        return da, db

    return _result(A @ B, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    shape_b = b.shape
    return _result(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, shape_b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    shape_b = b.shape
    return _result(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, shape_b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, _unbroadcast(g * A, B.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(a.data * pos, (a,), lambda g: (g * pos,))


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "add": add, "mul": mul, "sub": sub}


def pointwise(a: Tensor, kind: str, b=None) -> Tensor:
    """Dispatch by name: sigmoid, tanh, relu, add, sub, mul, or scale (``b`` is the factor)."""
    if kind == "scale":
        return scale(a, b)
    fn = _POINTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    if kind in ("add", "sub", "mul"):
        if b is None or _as_tensor(b).shape != a.shape:
            raise ValueError(f"{kind}: shape mismatch {a.shape} vs {None if b is None else _as_tensor(b).shape}")
        return fn(a, _as_tensor(b))
    return fn(a)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ------------------------------------------------------------------- shapes

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def embedding(weight: Tensor, idx) -> Tensor:
    """Row lookup ``weight[idx]``; output shape is ``idx.shape + (d,)``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"embedding index out of range for {weight.shape[0]} rows")
    rows, d = weight.shape

    def bw(g):
        dw = np.zeros((rows, d))
        np.add.at(dw, idx.reshape(-1), g.reshape(-1, d))
        return (dw,)

    return _result(weight.data[idx], (weight,), bw)


def gather_rows(x: Tensor, b_idx, t_idx) -> Tensor:
    """Pick ``x[b_idx[n], t_idx[n], :]`` from a ``(B, L, d)`` tensor into ``(N, d)``."""
    b_idx = np.asarray(b_idx, dtype=np.int64)
    t_idx = np.asarray(t_idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape)
        np.add.at(dx, (b_idx, t_idx), g)
        return (dx,)

    return _result(x.data[b_idx, t_idx], (x,), bw)


# ------------------------------------------------------- normalization etc.

def row_softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, optionally after adding an ``(m, n)`` mask.

    Mask entries are 0 (allowed) or :data:`FORBIDDEN`. A row with no allowed
    entry is an error.
    """
    if a.ndim < 1:
        raise ValueError("row_softmax needs at least one axis")
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != a.shape[-2:]:
            raise ValueError(f"row_softmax: mask {mask.shape} does not match {a.shape}")
        if (mask <= FORBIDDEN).all(axis=-1).any():
            raise ValueError("row_softmax: a row has no attendable position")
    elif (a.data <= FORBIDDEN).all(axis=-1).any():
        raise ValueError("row_softmax: a row has no attendable position")
    y = kernels.softmax_forward(a.data, mask)
    return _result(y, (a,), lambda g: (kernels.softmax_backward(y, g),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    shape = x.shape
    d = shape[-1]
    y, xhat, rstd = kernels.layernorm_forward(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def bw(g):
        dx, dgamma, dbeta = kernels.layernorm_backward(g.reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(shape), dgamma, dbeta

    return _result(y.reshape(shape), (x, gamma, beta), bw)


def max_over_time(rows: Sequence[Tensor]) -> Tensor:
    """Coordinate-wise maximum of equally sized vectors.

    Each output coordinate's gradient goes to the single input holding the
    maximum; on ties, the earliest one.
    """
    if len(rows) == 0:
        raise ValueError("max_over_time: empty sequence")
    d = rows[0].shape
    if any(r.shape != d for r in rows) or len(d) != 1:
        raise ValueError("max_over_time: all inputs must be vectors of equal size")
    stacked = np.stack([r.data for r in rows])
    arg = stacked.argmax(axis=0)
    cols = np.arange(d[0])

    def bw(g):
        out = []
        for k in range(len(rows)):
            out.append(np.where(arg == k, g, 0.0))
        return tuple(out)

    return _result(stacked[arg, cols], tuple(rows), bw)


def segment_max(x: Tensor, starts, lengths) -> Tensor:
    """Batched :func:`max_over_time` over ``x[b, starts[b]:starts[b]+lengths[b]]``."""
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if (lengths < 1).any():
        raise ValueError("segment_max: every segment needs at least one row")
    if (starts + lengths > x.shape[1]).any() or (starts < 0).any():
        raise IndexError("segment_max: segment out of range")
    out, arg = kernels.segment_max_forward(x.data, starts, lengths)
    shape = x.shape
    B, d = out.shape

    def bw(g):
        dx = np.zeros(shape)
        bi = np.repeat(np.arange(B), d)
        ji = np.tile(np.arange(d), B)
        dx[bi, arg.reshape(-1), ji] = g.reshape(-1)
        return (dx,)

    return _result(out, (x,), bw)


# ------------------------------------------------------------------- losses

def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, rows, targets, weights) -> Tensor:
    """``-sum_n weights[n] * log softmax(logits[rows[n]])[targets[n]]``.

    ``rows`` lets one logit row serve several targets (the context head).
    """
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target token index out of range for vocabulary of size {V}")
    logp = _log_softmax(logits.data)
    loss = -(weights * logp[rows, targets]).sum()

    def bw(g):
        p = np.exp(logp)
        w_row = np.bincount(rows, weights=weights, minlength=logits.shape[0])
        d = p * w_row[:, None]
        np.add.at(d, (rows, targets), -weights)
        return (d * float(g),)

    return _result(np.asarray(loss), (logits,), bw)


def bce_with_logits(logits: Tensor, labels, weights) -> Tensor:
    """Weighted binary cross-entropy, summed: ``-sum w*(y log p + (1-y) log(1-p))``."""
    z = logits.data
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    w = np.asarray(weights, dtype=np.float64).reshape(z.shape)
    # log(1 + exp(-|z|)) form is stable for large |z|
    loss = (w * (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))).sum()

    def bw(g):
        e = np.exp(-np.abs(z))
        p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (w * (p - y) * float(g),)

    return _result(np.asarray(loss), (logits,), bw)


def sparse_matmul(x, w: Tensor) -> Tensor:
    """Product of a constant scipy sparse matrix with a dense tensor."""
    return _result(np.asarray(x @ w.data), (w,), lambda g: (np.asarray(x.T @ g),))
