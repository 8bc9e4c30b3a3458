"""Reverse-mode differentiation over dense numpy arrays.

Only the operations the recommender needs are provided. Operations are
recorded on the innermost active :class:`Tape`; outside a tape nothing is
recorded, which is the fast path used for evaluation.

Training runs in float32. A float64 "shadow" copy of the same graph is used
by :func:`finite_difference_check` to verify gradients.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32
BCE_EPS = 1e-7


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records operations for one backward pass.

    Use as a context manager; operations executed inside the block on tensors
    that require gradients are recorded in order.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.used = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Optional[Tape]:
    s = _stack()
    return s[-1] if s else None


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Fill ``.grad`` of every recorded tensor with d(loss)/d(tensor)."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.used:
        raise TapeError("backward already ran on this tape; call reset() before reuse")
    if not any(node.out is loss for node in tape.nodes):
        if not loss.requires_grad:
            raise TapeError("loss was not produced on this tape")
        # a leaf used directly as the loss
        loss.grad = np.ones_like(loss.data)
        tape.used = True
        return
    tape.used = True

    # grads are rebuilt from zero on every pass
    for node in tape.nodes:
        node.out.grad = None
        for t in node.inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            # out-of-place: backward rules may hand the same array to several inputs
            t.grad = gi if t.grad is None else t.grad + gi


# ---------------------------------------------------------------------------
# relu kink monitor (used only by finite differences)


class _KinkLog:
    def __init__(self) -> None:
        self.masks: list[np.ndarray] = []


def _log_kink(x: np.ndarray) -> None:
    log = getattr(_local, "kinks", None)
    if log is not None:
        log.masks.append(x > 0)


# ---------------------------------------------------------------------------
# operations


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape [batch, in_dim]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not conform to weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, weight.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, bw)


def dilated_causal_conv1d(x: Tensor, filters: Tensor, dilation: int, bias: Tensor | None = None) -> Tensor:
    """Causal convolution; output position s reads x[s - dilation*i] for tap i.

    ``x`` is [batch, channels, length], ``filters`` is [out_ch, channels, k].
    Positions before the start read as zero (left padding of
    (k-1)*dilation), so the length is preserved.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv1d: input must be [batch, channels, length], got {x.shape}")
    y = causal_conv_time_major(transpose(x, (2, 0, 1)), filters, dilation, bias)
    return transpose(y, (1, 2, 0))


def causal_conv_time_major(x: Tensor, filters: Tensor, dilation: int, bias: Tensor | None = None) -> Tensor:
    """The same convolution on a [length, batch, channels] input.

    Time-major keeps every shifted window contiguous, so each tap is a single
    matrix product and taps that only see padding are skipped.
    """
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation!r}")
    if filters.data.ndim != 3 or filters.shape[2] < 1:
        raise ValueError(f"filters must be [out_ch, channels, k] with k >= 1, got {filters.shape}")
    if x.data.ndim != 3 or x.shape[2] != filters.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} does not conform to filters {filters.shape}")
    out_ch, ch, k = filters.shape
    length, batch, _ = x.shape
    xd = x.data
    taps = [(i, dilation * i) for i in range(k) if dilation * i < length]
    wt = [np.ascontiguousarray(filters.data[:, :, i].T) for i, _ in taps]  # [C, O]
    out = np.empty((length, batch, out_ch), dtype=xd.dtype)
    out[:] = 0 if bias is None else bias.data
    for (i, shift), w in zip(taps, wt):
        n = length - shift
        out[shift:] += (xd[:n].reshape(n * batch, ch) @ w).reshape(n, batch, out_ch)

    def bw(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gf = np.zeros_like(filters.data) if filters.requires_grad else None
        for (i, shift), w in zip(taps, wt):
            n = length - shift
            gs = g[shift:].reshape(n * batch, out_ch)
            if gx is not None:
                gx[:n] += (gs @ w.T).reshape(n, batch, ch)
            if gf is not None:
                gf[:, :, i] = (xd[:n].reshape(n * batch, ch).T @ gs).T
        gb = g.sum(axis=(0, 1)) if bias is not None and bias.requires_grad else None
        return gx, gf, gb

    inputs = (x, filters) if bias is None else (x, filters, bias)
    return _result(out, inputs, bw)


def relu(x: Tensor) -> Tensor:
    _log_kink(x.data)
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) at the working precision."""
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    lo = np.finfo(d.dtype).tiny
    hi = np.nextafter(d.dtype.type(1), d.dtype.type(0))
    s = np.clip(s, lo, hi)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1 - t * t),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        out = np.asarray(x.data.sum(), dtype=x.data.dtype)
        return _result(out, (x,), lambda g: (np.broadcast_to(g, shape),))
    out = x.data.sum(axis=axis)
    return _result(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ValueError("concat needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat: leading dims {p.shape[:-1]} and {lead} differ")
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([p.data for p in parts], axis=-1)

    def bw(g):
        return [g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts))]

    return _result(out, tuple(parts), bw)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by ``ids``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    vocab = table.shape[0]
    if ids.size:
        bad = ids[(ids < 0) | (ids >= vocab)]
        if bad.size:
            raise IndexError(f"id {int(bad[0])} out of range for table with {vocab} rows")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        if ids.size:
            order = np.argsort(ids, kind="stable")
            sorted_ids = ids[order]
            starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
            full[sorted_ids[starts]] = np.add.reduceat(g[order], starts, axis=0)
        return (full,)

    return _result(out, (table,), bw)


def dropout(
    x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None, time_axis: int = 2
) -> Tensor:
    """Spatial dropout: zeroes whole channels of a [batch, channels, length] input.

    The mask is shared along ``time_axis`` (0 for the TCN's time-major layout).
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    if x.data.ndim != 3:
        raise DimensionError(f"spatial dropout expects [batch, channels, length], got {x.shape}")
    mask_shape = list(x.shape)
    mask_shape[time_axis] = 1
    keep = rng.random(mask_shape) >= rate
    mask = (keep / (1 - rate)).astype(x.data.dtype)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), bw)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``out[b] = sum_i weights[b, i] * values[b, i]`` for values [B, K, D]."""
    if weights.data.ndim != 2 or values.data.ndim != 3 or weights.shape != values.shape[:2]:
        raise DimensionError(f"weighted_sum: weights {weights.shape} vs values {values.shape}")
    wd, vd = weights.data, values.data
    out = np.einsum("bk,bkd->bd", wd, vd)

    def bw(g):
        gw = np.einsum("bd,bkd->bk", g, vd) if weights.requires_grad else None
        gv = wd[:, :, None] * g[:, None, :] if values.requires_grad else None
        return gw, gv

    return _result(out, (weights, values), bw)


def bce_loss(pred: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [eps, 1 - eps]."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(pred.data.dtype).reshape(pred.shape)
    p = pred.data
    clipped = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    inside = (p >= BCE_EPS) & (p <= 1 - BCE_EPS)
    n = p.size
    losses = -(y * np.log(clipped) + (1 - y) * np.log(1 - clipped))
    out = np.asarray(losses.mean(), dtype=p.dtype)

    def bw(g):
        d = (-y / clipped + (1 - y) / (1 - clipped)) / n
        return (g * d * inside,)

    return _result(out, (pred,), bw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_update(param: Tensor, state: AdamState) -> None:
    if param.grad is None:
        raise TapeError(f"parameter {param.name or param.shape} has no gradient")
    g = param.grad
    state.t += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1 ** state.t)
    vhat = state.v / (1 - state.beta2 ** state.t)
    param.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.data.dtype)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    coords: np.ndarray
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rel_tol: float = 1e-3

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.rel_tol


def _eval_scalar(f, x: np.ndarray) -> tuple[float, list[np.ndarray]]:
    log = _KinkLog()
    _local.kinks = log
    try:
        val = f(Tensor(x, dtype=np.float64)).item()
    finally:
        _local.kinks = None
    return val, log.masks


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    at: Tensor | np.ndarray,
    rel_tol: float = 1e-3,
    h: float = 1e-3,
    coords: Sequence[int] | None = None,
    refinements: int = 2,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences in float64.

    ``f`` must build its result from the tensor it receives and be
    deterministic. When a step flips a rectifier input sign the coordinate
    is retried with a step ten times smaller, up to ``refinements`` times;
    coordinates that still straddle a kink are reported as skipped.
    """
    x0 = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    with Tape() as tape:
        xt = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
        out = f(xt)
    if out.requires_grad:
        backward(out, tape)
    ga = np.zeros_like(x0) if xt.grad is None else xt.grad
    ga = ga.reshape(-1)

    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    _, base_masks = _eval_scalar(f, x0)
    an, nu, kept, skipped = [], [], [], []
    for j in idx:
        step = h
        for _ in range(refinements + 1):
            xp = flat.copy()
            xp[j] += step
            fp, mp = _eval_scalar(f, xp.reshape(x0.shape))
            xm = flat.copy()
            xm[j] -= step
            fm, mm = _eval_scalar(f, xm.reshape(x0.shape))
            crossed = any(not np.array_equal(a, b) for a, b in zip(mp, base_masks)) or any(
                not np.array_equal(a, b) for a, b in zip(mm, base_masks)
            )
            if not crossed:
                break
            step /= 10
        if crossed:
            skipped.append(j)
            continue
        kept.append(j)
        an.append(ga[j])
        nu.append((fp - fm) / (2 * step))
    an = np.asarray(an, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(an), np.abs(nu)), 1e-8)
    rel = np.abs(an - nu) / denom
    return GradCheckReport(an, nu, rel, np.asarray(kept, dtype=np.int64), np.asarray(skipped, dtype=np.int64), rel_tol)
