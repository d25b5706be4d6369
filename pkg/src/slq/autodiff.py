"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its forward value with numpy and, when a
:class:`Tape` is active and any input requires a gradient, appends a record
holding a local backward rule. :func:`backward` replays the tape in exact
reverse recording order. Gradients land only in leaf tensors created with
``requires_grad=True``; frozen leaves never receive grad storage.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, DegenerateEmbeddingError

_DEFAULT_DTYPE = np.float32
MASK_FILL = -1e9

_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """An n-d float array with an optional gradient accumulator."""

    __slots__ = ("data", "_requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _leaf: bool = True):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.is_leaf = _leaf
        self.name = name
        self.grad = None
        self._requires_grad = False
        self.requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self._requires_grad = bool(flag)
        if self.is_leaf:
            self.grad = np.zeros_like(self.data) if flag else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and not (isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64)):
        dtype = _DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops recorded while the tape is active.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. Tapes nest, the innermost active one records.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output, rule) -> None:
        self.records.append(_Record(tuple(inputs), output, rule))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on ``tape``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable tensor")
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad += seed
        return
    if not tape.records or tape.records[-1].output is not loss:
        if not any(r.output is loss for r in tape.records):
            raise ContractError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        grads = rec.rule(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad += gi
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype, _leaf=False)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(inputs, out, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def rule(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def rule(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def rule(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    d2 = d * d
    t = np.tanh(c * d * (1 + k * d2))
    half = d.dtype.type(0.5)
    out = half * d * (1 + t)

    def rule(g):
        dt = (1 - t * t) * c * (1 + 3 * k * d2)
        return (g * (half * (1 + t) + half * d * dt),)

    return _result(out, (x,), rule)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        return _matmul_shared_rhs(a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), rule)


def _matmul_shared_rhs(a: Tensor, b: Tensor) -> Tensor:
    # (..., m, k) @ (k, n) as a single 2-d product
    k, n = b.shape
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(*lead, n)

    def rule(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), rule)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------- normalizers

def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    d = x.data
    if not np.isfinite(d).all():
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), rule)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    d = x.data
    if not np.isfinite(d).all():
        raise NumericError("log_softmax input contains non-finite values")
    shifted = d - d.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise DimensionError(f"layer_norm affine params {gain.shape}/{bias.shape} do not match {dim}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, dim).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, dim).sum(axis=0)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), rule)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm."""
    d = x.data
    n = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    if (n <= np.finfo(d.dtype).tiny).any() or not np.isfinite(n).all():
        raise DegenerateEmbeddingError("cannot normalize a zero (or non-finite) vector")
    y = d / n

    def rule(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _result(y, (x,), rule)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = x.data.mean(axis=axis)
    src = x.shape

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, src).copy(),)

    return _result(out, (x,), rule)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), rule)


# ---------------------------------------------------------------- indexing / layout

def _is_basic(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in key)


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]
    basic = _is_basic(key)

    def rule(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), rule)


def slice_last_n(x: Tensor, n: int, axis: int = -2) -> Tensor:
    """The trailing ``n`` entries along ``axis`` (order preserved)."""
    length = x.shape[axis]
    if n < 1 or n > length:
        raise DimensionError(f"cannot take last {n} of {length}")
    key = [slice(None)] * x.data.ndim
    key[axis] = slice(length - n, length)
    return index(x, tuple(key))


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _result(out, tuple(tensors), rule)


def concat_along_sequence(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the sequence axis (second to last)."""
    return concat(tensors, axis=-2)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), rule)


def causal_mask_fill(scores: Tensor, allowed: np.ndarray) -> Tensor:
    """Replace disallowed attention logits with a large negative constant.

    ``allowed`` is a boolean array broadcastable to ``scores``.
    """
    allowed = np.asarray(allowed, dtype=bool)
    fill = scores.data.dtype.type(MASK_FILL)
    out = np.where(allowed, scores.data, fill)
    return _result(out, (scores,), lambda g: (np.where(allowed, g, 0).astype(g.dtype, copy=False),))


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax.

    Rows whose target equals ``ignore_index`` are excluded from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    d = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    if t.shape[0] != d.shape[0]:
        raise DimensionError("targets do not match logits rows")
    if not np.isfinite(d).all():
        raise NumericError("cross_entropy logits contain non-finite values")
    keep = t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ContractError("no target rows to score")
    shifted = d - d.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(keep)[0]
    nll = -logp[rows, t[rows]]
    out = np.asarray(nll.sum() / count, dtype=d.dtype)

    def rule(g):
        p = np.exp(logp)
        p[~keep] = 0
        p[rows, t[rows]] -= 1
        return ((p * (g / count)).reshape(logits.shape),)

    return _result(out, (logits,), rule)


# ---------------------------------------------------------------- checking

def numerical_gradient(fn: Callable[[], float], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``x.data``.

    ``fn`` must read ``x.data`` at call time; entries are perturbed in place
    and restored.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
