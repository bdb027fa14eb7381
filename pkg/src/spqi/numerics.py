"""Dense float64 tensors with a reverse-mode gradient tape.

Every model component in the package is written against the ops in this
module. Ops executed while a :class:`GradTape` is active, and touching at
least one tensor with ``requires_grad=True``, are recorded together with a
closure computing the vector-Jacobian product. :meth:`GradTape.gradient`
replays the records in exact reverse order.

Example::

    w = Tensor(np.ones((3, 1)), requires_grad=True)
    with GradTape() as tape:
        loss = bce_loss(activation("sigmoid", matmul(x, w)).reshape(-1), y)
    (dw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "DimensionError",
    "ContractError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "gather_rows",
    "take",
    "abs_floor",
    "activation",
    "masked_softmax",
    "masked_max",
    "l2_norm",
    "bce_loss",
    "grad_check",
    "BCE_EPS",
]

BCE_EPS = 1e-7


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An op precondition was violated."""


_ACTIVE: list["GradTape"] = []


class Tensor:
    """An immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.array(arr, dtype=np.float64, copy=None, order="C")
        if arr.flags.writeable and arr.base is not None:
            arr = arr.copy()
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of executed ops; a context manager.

    Tapes nest: ops are recorded on every active tape. Gradients are
    accumulated in a dict keyed by ``id()`` of the tensor, so the tape keeps
    the tensors alive until it is discarded.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of scalar ``target`` w.r.t. each source (zeros if unreachable)."""
        if target.data.size != 1:
            raise ContractError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, backward in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            grads[id(s)].reshape(s.shape) if id(s) in grads else np.zeros(s.shape)
            for s in sources
        ]


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    track = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        for tape in _ACTIVE:
            tape._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-d operands (``a`` may carry a 1-d right operand)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _emit(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    try:
        out = A * B
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    try:
        out = A / B
    except ValueError as exc:
        raise DimensionError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * A / (B * B), B.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in ts]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in ts]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from exc
    n = len(ts)
    return _emit(
        out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


def gather_rows(table, idx) -> Tensor:
    """Rows of a 2-d ``table`` at integer ``idx`` (any shape); scatter-add backward."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {table.shape[0]} rows")
    out = table.data[idx]
    rows, d = table.shape

    def backward(g):
        acc = np.zeros((rows, d))
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, d))
        return (acc,)

    return _emit(out, (table,), backward)


def take(a, indices, axis: int) -> Tensor:
    """``np.take`` along ``axis`` for a 1-d index list, scatter-add backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"take: indices must be 1-d, got shape {idx.shape}")
    out = np.take(a.data, idx, axis=axis)
    shape = a.shape

    def backward(g):
        acc = np.zeros(shape)
        moved = np.moveaxis(acc, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (acc,)

    return _emit(out, (a,), backward)


def abs_floor(a, floor: float) -> Tensor:
    """``sign(a) * max(|a|, floor)`` with 0 taken as positive; gradient 0 on the floor."""
    a = as_tensor(a)
    A = a.data
    live = np.abs(A) > floor
    out = np.where(live, A, np.where(A < 0, -floor, floor))
    return _emit(out, (a,), lambda g: (np.where(live, g, 0.0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x, slope: float = 0.2) -> Tensor:
    """Elementwise ``sigmoid``, ``leaky_relu`` or ``elu``."""
    x = as_tensor(x)
    X = x.data
    if not np.all(np.isfinite(X)):
        raise ContractError(f"{kind}: non-finite input")
    if kind == "sigmoid":
        out = _sigmoid(X)
        return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))
    if kind == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise ContractError(f"leaky_relu slope must be in (0, 1), got {slope}")
        d = np.where(X > 0, 1.0, slope)
        return _emit(X * d, (x,), lambda g: (g * d,))
    if kind == "elu":
        neg_part = np.expm1(np.minimum(X, 0.0))
        out = np.where(X > 0, X, neg_part)
        d = np.where(X > 0, 1.0, neg_part + 1.0)
        return _emit(out, (x,), lambda g: (g * d,))
    raise ValueError(f"unknown activation {kind!r}")


def masked_softmax(scores, mask, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to ``mask``; masked entries are exactly 0.

    ``mask`` broadcasts against ``scores``. Every slice along ``axis`` must
    keep at least one entry.
    """
    scores = as_tensor(scores)
    S = scores.data
    M = np.broadcast_to(np.asarray(mask, dtype=bool), S.shape)
    if not np.all(M.any(axis=axis)):
        raise ContractError("masked_softmax: a slice has no unmasked entries")
    shifted = np.where(M, S, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(M, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (scores,), backward)


def masked_max(x, mask, axis: int = -1) -> Tensor:
    """Max along ``axis`` over masked entries; 0 where a slice is fully masked."""
    x = as_tensor(x)
    X = x.data
    M = np.broadcast_to(np.asarray(mask, dtype=bool), X.shape)
    filled = np.where(M, X, -np.inf)
    arg = np.argmax(filled, axis=axis)
    any_ = M.any(axis=axis)
    best = np.take_along_axis(X, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    out = np.where(any_, best, 0.0)

    def backward(g):
        gx = np.zeros_like(X)
        np.put_along_axis(
            gx, np.expand_dims(arg, axis), np.expand_dims(np.where(any_, g, 0.0), axis), axis=axis
        )
        return (gx,)

    return _emit(out, (x,), backward)


def l2_norm(x, axis: int = -1, floor: float = 1e-12) -> Tensor:
    """Euclidean norm along ``axis``, floored so division by it stays finite."""
    x = as_tensor(x)
    X = x.data
    raw = np.sqrt((X * X).sum(axis=axis))
    out = np.maximum(raw, floor)
    live = raw > floor

    def backward(g):
        scale = np.where(live, g / out, 0.0)
        return (X * np.expand_dims(scale, axis),)

    return _emit(out, (x,), backward)


def bce_loss(p, y) -> Tensor:
    """Mean binary cross-entropy; ``p`` is clamped into ``[eps, 1 - eps]``."""
    p = as_tensor(p)
    Y = np.asarray(y, dtype=np.float64)
    if p.shape != Y.shape:
        raise DimensionError(f"bce_loss: predictions {p.shape} vs labels {Y.shape}")
    P = p.data
    Pc = np.clip(P, BCE_EPS, 1.0 - BCE_EPS)
    n = P.size
    loss = -np.mean(Y * np.log(Pc) + (1.0 - Y) * np.log1p(-Pc))
    inside = (P >= BCE_EPS) & (P <= 1.0 - BCE_EPS)

    def backward(g):
        d = (-(Y / Pc) + (1.0 - Y) / (1.0 - Pc)) / n
        return (g * np.where(inside, d, 0.0),)

    return _emit(np.asarray(loss), (p,), backward)


def grad_check(
    f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` receives one Tensor per input and must return a scalar Tensor.
    The relative error of each coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check eps must be in [1e-7, 1e-3], got {eps}")
    base = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    with GradTape() as tape:
        out = f(*leaves)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    analytic = tape.gradient(out, leaves)

    worst = 0.0
    for k, b in enumerate(base):
        flat = b.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = f(*[Tensor(x) for x in base]).data.item()
            flat[j] = orig - eps
            down = f(*[Tensor(x) for x in base]).data.item()
            flat[j] = orig
            num = (up - down) / (2.0 * eps)
            ana = analytic[k].reshape(-1)[j].item()
            denom = max(abs(ana), abs(num), 1e-8)
            worst = max(worst, abs(ana - num) / denom)
    return worst
