"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything is double precision and numpy-backed. Operations are module
functions; :class:`Tensor` adds operator sugar that forwards to them. While a
:class:`Tape` is active (``with Tape() as tape:``), every operation whose
output depends on a ``requires_grad`` tensor appends a record, and
:func:`backward` replays those records in reverse to accumulate gradients.
Gradients add across uses and across repeated backward calls; callers reset
``.grad`` between steps.

Tapes are tracked per thread, so independent tapes may run concurrently in
separate threads. Tensor data is only mutated by optimizer steps.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# tensor and tape


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable):
        self.out = out
        self.inputs = inputs
        self.fn = fn


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = _ACTIVE.stack = []
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one reverse sweep."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.records)


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    """Build the output tensor and record it on the active tape if needed.

    ``fn`` maps the output gradient to a tuple of per-input gradients
    (``None`` for inputs that do not need one).
    """
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _current_tape()
    if tape is not None and out.requires_grad:
        tape.records.append(_Record(out, inputs, fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every requires_grad
    tensor reachable from ``loss`` through the tape's records.

    Grads add into any existing ``.grad``, so replaying twice doubles them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g_out = adjoint.get(id(rec.out))
        if g_out is None:
            continue  # dead branch, nothing downstream reached the loss
        for t, g in zip(rec.inputs, rec.fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g
                holders[key] = t
    for key, t in holders.items():
        g = adjoint[key]
        if g.shape != t.data.shape:
            g = g.reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _finish(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _finish(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def fn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _finish(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _finish(a.data / b.data, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        return ((-g) if a.requires_grad else None,)

    return _finish(-a.data, (a,), fn)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def fn(g):
        return (g.reshape(a.data.shape) if a.requires_grad else None,)

    return _finish(a.data.reshape(shape), (a,), fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got shape {a.shape}")

    def fn(g):
        return (np.swapaxes(g, -1, -2) if a.requires_grad else None,)

    return _finish(np.swapaxes(a.data, -1, -2).copy(), (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ndim = ts[0].data.ndim
    ax = axis if axis >= 0 else axis + ndim
    for t in ts[1:]:
        if t.data.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {ts[0].shape} vs {t.shape}")
        for d in range(ndim):
            if d != ax and t.shape[d] != ts[0].shape[d]:
                raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    widths = [t.shape[ax] for t in ts]
    offsets = np.cumsum(widths)[:-1]

    def fn(g):
        pieces = np.split(g, offsets, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _finish(np.concatenate([t.data for t in ts], axis=ax), ts, fn)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    a = as_tensor(a)
    ax = axis if axis >= 0 else axis + a.data.ndim
    if not (0 <= ax < a.data.ndim):
        raise ShapeError(f"slice_along: axis {axis} out of range for shape {a.shape}")
    if not (0 <= start < stop <= a.shape[ax]):
        raise ShapeError(f"slice_along: [{start}, {stop}) out of range for shape {a.shape}")
    index = tuple(slice(start, stop) if d == ax else slice(None) for d in range(a.data.ndim))

    def fn(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _finish(a.data[index].copy(), (a,), fn)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims must match by equality."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2+ dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    for da, db in zip(reversed(a.shape[:-2]), reversed(b.shape[:-2])):
        if da != db:
            raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")

    def fn(g):
        ga = (
            _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if a.requires_grad
            else None
        )
        gb = (
            _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _finish(a.data @ b.data, (a, b), fn)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a if a >= 0 else a + ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    ax = _axis_tuple(axis, a.data.ndim)

    def fn(g):
        if not a.requires_grad:
            return (None,)
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape),)

    return _finish(a.data.sum(axis=ax, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _axis_tuple(axis, a.data.ndim)
    if ax is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[d] for d in ax], dtype=np.int64))

    def fn(g):
        if not a.requires_grad:
            return (None,)
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _finish(a.data.mean(axis=ax, keepdims=keepdims), (a,), fn)


# ---------------------------------------------------------------------------
# nonlinear ops


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def fn(g):
        if not a.requires_grad:
            return (None,)
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _finish(x * cdf, (a,), fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        if not a.requires_grad:
            return (None,)
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _finish(s, (a,), fn)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Population variance; eps sits inside the square root.
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last dim {d}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        g_beta = g.sum(axis=lead) if beta.requires_grad else None
        if a.requires_grad:
            gx_hat = g * gamma.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            g_a = (gx_hat - m1 - xhat * m2) * inv_std
        else:
            g_a = None
        return g_a, g_gamma, g_beta

    return _finish(gamma.data * xhat + beta.data, (a, gamma, beta), fn)


# ---------------------------------------------------------------------------
# top-k selection and masked softmax


def top_k_indices(x, k: int) -> np.ndarray:
    """Indices of the k largest entries of a vector, ascending.

    Ties break toward the lowest index (stable sort on descending value).
    Selection is not differentiable and returns a plain integer array.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 1:
        raise ShapeError(f"top_k_indices needs a vector, got shape {data.shape}")
    n = data.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"top_k_indices: k={k} out of range [1, {n}]")
    order = np.argsort(-data, kind="stable")[:k]
    return np.sort(order)


def masked_topk_softmax(logits: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Softmax over the k largest logits of each row; zeros elsewhere.

    Works on the last axis of any-rank input. Returns the weights and the
    selected indices (``[..., k]``, ascending). The selection itself is a
    constant during backprop; gradients flow only through selected logits.
    """
    logits = as_tensor(logits)
    x = logits.data
    n = x.shape[-1]
    if not (1 <= k <= n):
        raise ValueError(f"masked_topk_softmax: k={k} out of range [1, {n}]")
    order = np.argsort(-x, axis=-1, kind="stable")[..., :k]
    selected = np.sort(order, axis=-1)
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, selected, True, axis=-1)
    neg_inf = np.where(mask, x, -np.inf)
    shifted = neg_inf - neg_inf.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        if not logits.requires_grad:
            return (None,)
        inner = (g * w).sum(axis=-1, keepdims=True)
        return (w * (g - inner),)

    return _finish(w, (logits,), fn), selected


# ---------------------------------------------------------------------------
# classification loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[B, C]`` logits against int labels."""
    logits = as_tensor(logits)
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy needs [B, C] logits, got shape {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: labels shape {y.shape} does not match batch {x.shape[0]}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("cross_entropy: labels must be integers")
    n_batch, n_classes = x.shape
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"cross_entropy: label out of range [0, {n_classes})")
    m = x.max(axis=1, keepdims=True)
    log_z = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    loss = (log_z - x[np.arange(n_batch), y]).mean()

    def fn(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n_batch), y] -= 1.0
        return (float(np.reshape(g, ())) * p / n_batch,)

    return _finish(np.float64(loss), (logits,), fn)


# ---------------------------------------------------------------------------
# Adam with coupled L2 weight decay


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(
        cls,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update. Weight decay is coupled L2 (added to the
    gradient before the moment updates), matching optimizers that fold decay
    into the gradient rather than decaying weights directly.
    """
    for name in params:
        if name not in grads:
            raise ValueError(f"adam_step: no gradient for parameter {name!r}")
    state.t += 1
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} does not match param {name!r} shape {p.data.shape}"
            )
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None
