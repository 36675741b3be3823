"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are plain functions (``add``, ``conv1d``, ``normalize`` ...). When
none of their arguments is a :class:`Tensor` they simply evaluate with numpy
and return an ``ndarray``; when at least one argument is a ``Tensor`` the call
is recorded on the active :class:`Tape` and a new ``Tensor`` is returned.  The
same model code therefore serves both the differentiable path and the plain
numerical path used by finite-difference oracles.

    tape = Tape()
    with tape:
        x = Tensor(3.0, name="x")
        y = mul(x, x)
    backward(tape, y)
    x.grad  # -> 6.0
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

__all__ = [
    "Tensor", "Tape", "TapeError", "ShapeError", "DomainError",
    "forward_eval", "backward", "finite_diff_check", "no_grad",
    "add", "sub", "mul", "scale", "matmul", "conv1d", "avg_pool", "upsample_linear",
    "sigmoid", "relu", "log", "absolute", "maximum", "sum_all", "normalize",
    "take", "channel_mask", "pad_channels", "cross_entropy_with_logits", "value_of",
]

_ids = itertools.count()
_local = threading.local()


class TapeError(ValueError):
    """Raised for malformed tape usage."""


class ShapeError(TapeError):
    pass


class DomainError(TapeError):
    pass


class Tensor:
    """A dense float64 array that participates in reverse-mode differentiation."""

    __slots__ = ("values", "grad", "node_id", "name", "requires_grad")

    def __init__(self, values, name: str | None = None, requires_grad: bool = True):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.node_id = next(_ids)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, node={self.node_id})"

    # thin operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Record:
    op_id: int
    name: str
    inputs: tuple
    output: Tensor
    attrs: dict
    fwd: Callable
    bwd: Callable


@dataclass
class Tape:
    """Ordered list of recorded primitive operations."""

    records: list = field(default_factory=list)

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

    def leaves(self) -> list[Tensor]:
        produced = {r.output.node_id for r in self.records}
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if isinstance(t, Tensor) and t.node_id not in produced:
                    seen.setdefault(t.node_id, t)
        return list(seen.values())


def _active_tape() -> Tape:
    stack = getattr(_local, "stack", None)
    if not stack:
        raise TapeError("operation on a Tensor outside of an active Tape context")
    return stack[-1]


class no_grad:
    """Context in which operations evaluate eagerly and record nothing."""

    def __enter__(self):
        _local.no_grad = getattr(_local, "no_grad", 0) + 1
        return self

    def __exit__(self, *exc):
        _local.no_grad -= 1


def value_of(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _apply(name: str, fwd: Callable, bwd: Callable, inputs: tuple, **attrs):
    vals = [value_of(x) for x in inputs]
    if getattr(_local, "no_grad", 0) or not any(isinstance(x, Tensor) for x in inputs):
        return fwd(*vals, op_id=None, **attrs)
    tape = _active_tape()
    op_id = len(tape.records)
    out = Tensor(fwd(*vals, op_id=op_id, **attrs), name=None)
    tape.records.append(_Record(op_id, name, inputs, out, attrs, fwd, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op_id, name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"op {op_id} ({name}): shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _add_fwd(a, b, op_id):
    _check_broadcast(op_id, "add", a, b)
    return a + b


def _add_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def add(a, b):
    return _apply("add", _add_fwd, _add_bwd, (a, b))


def sub(a, b):
    return add(a, scale(b, -1.0))


def _mul_fwd(a, b, op_id):
    _check_broadcast(op_id, "mul", a, b)
    return a * b


def _mul_bwd(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def mul(a, b):
    return _apply("mul", _mul_fwd, _mul_bwd, (a, b))


def _scale_fwd(a, op_id, factor):
    return a * factor


def _scale_bwd(g, out, a, factor):
    return (g * factor,)


def scale(a, factor: float):
    return _apply("scale", _scale_fwd, _scale_bwd, (a,), factor=float(factor))


def _matmul_fwd(a, b, op_id):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"op {op_id} (matmul): cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _matmul_bwd(g, out, a, b):
    a2 = a.reshape(1, -1) if a.ndim == 1 else a
    b2 = b.reshape(-1, 1) if b.ndim == 1 else b
    g2 = g.reshape(a2.shape[0], b2.shape[1])
    return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)


def matmul(a, b):
    return _apply("matmul", _matmul_fwd, _matmul_bwd, (a, b))


def _conv_pad(w, dilation):
    k = w.shape[2]
    if k % 2 != 1:
        raise ShapeError("conv1d kernel size must be odd")
    return dilation * (k - 1) // 2


def _conv_cols(x, w, dilation):
    """im2col: (n, c, L) -> (n, c * k, L), column ``c * k + t`` is tap ``t``."""
    n, c, length = x.shape
    k = w.shape[2]
    pad = _conv_pad(w, dilation)
    cols = np.zeros((n, c, k, length), dtype=np.result_type(x, w))
    for t in range(k):
        shift = t * dilation - pad  # tap t reads x[l + shift]
        lo, hi = max(0, -shift), min(length, length - shift)
        if lo < hi:
            cols[:, :, t, lo:hi] = x[:, :, lo + shift:hi + shift]
    return cols.reshape(n, c * k, length)


def _conv1d_fwd(x, w, b, op_id, dilation):
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"op {op_id} (conv1d): input {x.shape}, weight {w.shape}, bias {b.shape} are incompatible")
    cols = _conv_cols(x, w, dilation)
    return np.matmul(w.reshape(w.shape[0], -1), cols) + b[None, :, None]


def _conv1d_bwd(g, out, x, w, b, dilation):
    n, c, length = x.shape
    k = w.shape[2]
    pad = _conv_pad(w, dilation)
    cols = _conv_cols(x, w, dilation)
    gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    gcols = np.matmul(w.reshape(w.shape[0], -1).T, g).reshape(n, c, k, length)
    gxp = np.zeros((n, c, length + 2 * pad))
    for t in range(k):
        s = t * dilation
        gxp[:, :, s:s + length] += gcols[:, :, t]
    return gxp[:, :, pad:pad + length], gw, g.sum(axis=(0, 2))


def conv1d(x, w, b, dilation: int = 1):
    """Stride-1 dilated convolution, zero padded so the length is preserved.

    ``x`` is (batch, in_channels, length), ``w`` is (out, in, kernel) with an
    odd kernel, ``b`` is (out,).
    """
    return _apply("conv1d", _conv1d_fwd, _conv1d_bwd, (x, w, b), dilation=int(dilation))


def _pool_fwd(x, op_id, size):
    if x.ndim != 3 or x.shape[2] % size:
        raise ShapeError(f"op {op_id} (avg_pool): length {x.shape[-1]} not divisible by {size}")
    n, c, length = x.shape
    return x.reshape(n, c, length // size, size).mean(axis=3)


def _pool_bwd(g, out, x, size):
    return (np.repeat(g, size, axis=2) / size,)


def avg_pool(x, size: int):
    """Average pooling with window ``size`` and stride ``size`` along the last axis."""
    return _apply("avg_pool", _pool_fwd, _pool_bwd, (x,), size=int(size))


def interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Linear-interpolation matrix mapping ``n_in`` samples to ``n_in * factor``.

    Half-pixel centres with edge clamping, the 1D version of the usual
    bilinear resize without corner alignment.
    """
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def _up_fwd(x, op_id, factor):
    if x.ndim != 3:
        raise ShapeError(f"op {op_id} (upsample_linear): expected 3-d input, got {x.shape}")
    if factor == 1:
        return x.copy()
    return x @ interp_matrix(x.shape[2], factor).T


def _up_bwd(g, out, x, factor):
    if factor == 1:
        return (g,)
    return (g @ interp_matrix(x.shape[2], factor),)


def upsample_linear(x, factor: int):
    return _apply("upsample_linear", _up_fwd, _up_bwd, (x,), factor=int(factor))


def _sigmoid_fwd(x, op_id):
    # split by sign for overflow-free evaluation
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_bwd(g, out, x):
    return (g * out * (1.0 - out),)


def sigmoid(x):
    return _apply("sigmoid", _sigmoid_fwd, _sigmoid_bwd, (x,))


def _relu_fwd(x, op_id):
    return np.maximum(x, 0.0)


def _relu_bwd(g, out, x):
    return (g * (x > 0),)


def relu(x):
    return _apply("relu", _relu_fwd, _relu_bwd, (x,))


def _log_fwd(x, op_id):
    if np.any(x <= 0):
        raise DomainError(f"op {op_id} (log): non-positive argument (clamp before taking logs)")
    return np.log(x)


def _log_bwd(g, out, x):
    return (g / x,)


def log(x):
    return _apply("log", _log_fwd, _log_bwd, (x,))


def _abs_fwd(x, op_id):
    return np.abs(x)


def _abs_bwd(g, out, x):
    return (g * np.sign(x),)


def absolute(x):
    return _apply("abs", _abs_fwd, _abs_bwd, (x,))


def _max_fwd(x, op_id, floor):
    return np.maximum(x, floor)


def _max_bwd(g, out, x, floor):
    return (g * (x > floor),)


def maximum(x, floor: float):
    """Elementwise ``max(x, floor)`` with a constant floor."""
    return _apply("maximum", _max_fwd, _max_bwd, (x,), floor=float(floor))


def _sum_fwd(x, op_id):
    return np.asarray(x.sum())


def _sum_bwd(g, out, x):
    return (np.broadcast_to(g, x.shape).copy(),)


def sum_all(x):
    return _apply("sum", _sum_fwd, _sum_bwd, (x,))


def _norm_fwd(x, op_id):
    if x.ndim != 1:
        raise ShapeError(f"op {op_id} (normalize): expected a vector, got {x.shape}")
    total = x.sum()
    if total <= 0:
        raise DomainError(f"op {op_id} (normalize): non-positive total {total}")
    return x / total


def _norm_bwd(g, out, x):
    total = x.sum()
    return ((g - np.dot(g, out)) / total,)


def normalize(x):
    """``x_i / sum_j x_j`` for a positive vector."""
    return _apply("normalize", _norm_fwd, _norm_bwd, (x,))


def _take_fwd(x, op_id, index):
    return np.asarray(x[index])


def _take_bwd(g, out, x, index):
    gx = np.zeros_like(x)
    np.add.at(gx, index, g)
    return (gx,)


def take(x, index):
    """Gather entries of a vector; ``index`` is an int or an integer array."""
    if not isinstance(index, (int, np.integer)):
        index = np.asarray(index, dtype=int)
    else:
        index = int(index)
    return _apply("take", _take_fwd, _take_bwd, (x,), index=index)


def _cmask_fwd(x, m, op_id):
    if x.ndim != 3 or m.shape != (x.shape[1],):
        raise ShapeError(f"op {op_id} (channel_mask): mask {m.shape} does not match input {x.shape}")
    return x * m[None, :, None]


def _cmask_bwd(g, out, x, m):
    return g * m[None, :, None], (g * x).sum(axis=(0, 2))


def channel_mask(x, m):
    """Multiply every channel of a (batch, channels, length) array by ``m[c]``."""
    return _apply("channel_mask", _cmask_fwd, _cmask_bwd, (x, m))


def _pad_fwd(x, op_id, width):
    if x.ndim != 3 or x.shape[1] > width:
        raise ShapeError(f"op {op_id} (pad_channels): cannot pad {x.shape} to {width} channels")
    out = np.zeros((x.shape[0], width, x.shape[2]))
    out[:, :x.shape[1]] = x
    return out


def _pad_bwd(g, out, x, width):
    return (g[:, :x.shape[1]],)


def pad_channels(x, width: int):
    """Zero-extend the channel axis of a (batch, channels, length) array to ``width``."""
    if value_of(x).shape[1] == width:
        return x
    return _apply("pad_channels", _pad_fwd, _pad_bwd, (x,), width=int(width))


def _log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _ce_fwd(z, op_id, labels):
    if z.ndim != 3 or labels.shape != (z.shape[0], z.shape[2]):
        raise ShapeError(f"op {op_id} (cross_entropy): logits {z.shape} vs labels {labels.shape}")
    lsm = _log_softmax(z)
    picked = np.take_along_axis(lsm, labels[:, None, :], axis=1)
    return np.asarray(-picked.mean())


def _ce_bwd(g, out, z, labels):
    soft = np.exp(_log_softmax(z))
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, labels[:, None, :], 1.0, axis=1)
    count = labels.size
    return (g * (soft - onehot) / count,)


def cross_entropy_with_logits(z, labels):
    """Mean over positions of the softmax cross entropy.

    ``z`` is (batch, classes, length); ``labels`` an integer array (batch, length).
    """
    return _apply("cross_entropy", _ce_fwd, _ce_bwd, (z,), labels=np.asarray(labels, dtype=int))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def forward_eval(tape: Tape, inputs: dict[str, Any] | None = None) -> dict[str, Tensor]:
    """Replay ``tape`` after overwriting named leaves with ``inputs``.

    Every recorded output is recomputed in place, so a following
    :func:`backward` uses the new activations. Returns the named tensors
    produced by the tape (leaves excluded).
    """
    inputs = inputs or {}
    by_name = {t.name: t for t in tape.leaves() if t.name is not None}
    for key, val in inputs.items():
        if key not in by_name:
            raise TapeError(f"no leaf named {key!r} on this tape")
        leaf = by_name[key]
        arr = np.array(value_of(val), dtype=np.float64)
        if arr.shape != leaf.shape:
            raise ShapeError(f"input {key!r}: shape {arr.shape} differs from leaf shape {leaf.shape}")
        leaf.values = arr
    named = {}
    for rec in tape.records:
        vals = [value_of(x) for x in rec.inputs]
        rec.output.values = rec.fwd(*vals, op_id=rec.op_id, **rec.attrs)
        if rec.output.name is not None:
            named[rec.output.name] = rec.output
    return named


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Accumulate ``d output / d leaf`` into every leaf's ``grad``.

    Returns the adjoints of the leaves keyed by ``node_id``.
    """
    if output.values.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    adj: dict[int, np.ndarray] = {output.node_id: np.ones_like(output.values)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(rec.output.node_id)
        g = adj.pop(rec.output.node_id, None)
        if g is None:
            continue
        vals = [value_of(x) for x in rec.inputs]
        grads = rec.bwd(g, rec.output.values, *vals, **rec.attrs)
        for x, gx in zip(rec.inputs, grads):
            if isinstance(x, Tensor):
                if x.node_id in adj:
                    adj[x.node_id] = adj[x.node_id] + gx
                else:
                    adj[x.node_id] = gx
    leaf_grads = {}
    for leaf in tape.leaves():
        g = adj.get(leaf.node_id)
        if g is not None and leaf.requires_grad:
            leaf.grad = leaf.grad + g
            leaf_grads[leaf.node_id] = g
    if output.node_id not in produced and output.requires_grad:
        # output is itself a leaf
        output.grad = output.grad + 1.0
        leaf_grads[output.node_id] = np.ones_like(output.values)
    return leaf_grads


def finite_diff_check(scalar_fn: Callable, point, step: float = 1e-6) -> float:
    """Max relative error between the tape gradient and central differences.

    ``scalar_fn`` takes a Tensor (differentiable call) or an ndarray (plain
    call) and returns a scalar. The error is normwise,
    ``max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, 1e-12)``, so
    coordinates whose gradient is almost zero do not turn round-off into a
    large ratio.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(value_of(point), dtype=np.float64)
    leaf = Tensor(x0.copy(), name="point")
    tape = Tape()
    with tape:
        out = scalar_fn(leaf)
    if isinstance(out, Tensor):
        backward(tape, out)
        analytic = leaf.grad
    else:
        analytic = np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(value_of(scalar_fn(xp.reshape(x0.shape))))
        fm = float(value_of(scalar_fn(xm.reshape(x0.shape))))
        num_flat[i] = (fp - fm) / (2.0 * step)
    if not x0.size:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / max(float(np.max(np.abs(analytic))), 1e-12))
