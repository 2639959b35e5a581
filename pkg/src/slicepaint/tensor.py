"""Dense array tensors with reverse-mode differentiation.

The engine is deliberately small: a ``Tensor`` wraps a numpy array, every
differentiable primitive computes its result eagerly and, when a ``Tape`` is
active, appends a backward closure to it.  ``backward`` replays the tape in
exact reverse execution order, accumulating gradients into the tensors that
participated.  ``Parameter`` tensors keep a preallocated gradient buffer so
an optimizer can always read it.

Storage is float32 by default.  The primitives preserve whatever float dtype
they are handed, which lets verification code (finite differences) run the
same graph in float64.  Reductions accumulate in float64 internally.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class ConfigError(ValueError):
    """A structural parameter (groups, dimensions, ...) is invalid."""


class DomainError(ValueError):
    """An argument falls outside the valid domain of an operation."""


class StateError(RuntimeError):
    """An operation was invoked in an invalid engine state."""


# --------------------------------------------------------------------------
# Tape

_active_tape: "Tape | None" = None


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Used as a context manager; while active, every primitive appends
    ``(output, backward_fn)``.  A tape can be consumed by ``backward`` once.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise StateError("a tape is already active; nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self._records)


def _record(out: "Tensor", backward_fn: Callable[[np.ndarray], None]) -> None:
    if _active_tape is not None:
        _active_tape._records.append((out, backward_fn))


# --------------------------------------------------------------------------
# Tensor / Parameter


class Tensor:
    """N-dimensional float array, the carrier for images and activations."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=np.float32) -> None:
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable tensor with a persistent gradient buffer and a name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "") -> None:
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def set_data(self, data: np.ndarray) -> None:
        """Replace the value, keeping the gradient buffer shape-consistent."""
        arr = np.asarray(data)
        self.data = arr
        self.grad = np.zeros_like(arr)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # own=True promises g is freshly allocated and may be adopted in place
    if t.grad is None:
        if own and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(x) to every tensor recorded on the tape.

    The loss must be a scalar produced under the given tape.  Gradients of
    intermediates are freed as soon as their producing record has run;
    Parameters keep theirs.  A tape can only be walked once.
    """
    if tape._consumed:
        raise StateError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        fn(g)
        if not isinstance(out, Parameter):
            out.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Elementwise primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward direction."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def fn(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    _record(out, fn)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def fn(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape), own=True)

    _record(out, fn)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def fn(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    _record(out, fn)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)

    def fn(g: np.ndarray) -> None:
        _accum(a, g * s, own=True)

    _record(out, fn)
    return out


def silu(a: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig)

    def fn(g: np.ndarray) -> None:
        _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))), own=True)

    _record(out, fn)
    return out


# --------------------------------------------------------------------------
# Reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    s = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(np.asarray(s).astype(a.data.dtype))

    def fn(g: np.ndarray) -> None:
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    _record(out, fn)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    m = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(np.asarray(m).astype(a.data.dtype))
    count = a.data.size // out.data.size

    def fn(g: np.ndarray) -> None:
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

    _record(out, fn)
    return out


# --------------------------------------------------------------------------
# Shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def fn(g: np.ndarray) -> None:
        _accum(a, g.reshape(a.data.shape))

    _record(out, fn)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)

    def fn(g: np.ndarray) -> None:
        _accum(a, g.transpose(inv))

    _record(out, fn)
    return out


def concat(parts: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fn(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    _record(out, fn)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def fn(g: np.ndarray) -> None:
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accum(a, buf, own=True)

    _record(out, fn)
    return out


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2-d operands and matched 3-d batches."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul expects matched 2-d or 3-d operands, got {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def fn(g: np.ndarray) -> None:
        if a.data.ndim == 2:
            _accum(a, g @ b.data.T, own=True)
            _accum(b, a.data.T @ g, own=True)
        else:
            _accum(a, np.matmul(g, b.data.transpose(0, 2, 1)), own=True)
            _accum(b, np.matmul(a.data.transpose(0, 2, 1), g), own=True)

    _record(out, fn)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer: x[N,F_in] @ weight[F_out,F_in]^T + bias[F_out]."""
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"linear: input {x.data.shape} incompatible with weight {weight.data.shape}")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def fn(g: np.ndarray) -> None:
        _accum(x, g @ weight.data, own=True)
        _accum(weight, g.T @ x.data, own=True)
        _accum(bias, g.sum(axis=0))

    _record(out, fn)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def fn(g: np.ndarray) -> None:
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * s, own=True)

    _record(out, fn)
    return out


# --------------------------------------------------------------------------
# Convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    # reshape forces the copy into a contiguous [N, C*kh*kw, Ho*Wo] buffer
    return view.reshape(n, c * kh * kw, ho * wo), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    x: [N,C,H,W], weight: [K,C,kh,kw], bias: [K].  Differentiable w.r.t.
    all three operands.
    """
    n, c, h, w = x.data.shape
    k, cw, kh, kw = weight.data.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols, ho, wo = x.data.reshape(n, c, h * w), h, w
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols, ho, wo = _im2col(xp, kh, kw, stride)
        hp, wp = xp.shape[2], xp.shape[3]
    w2 = weight.data.reshape(k, c * kh * kw)
    out_data = np.matmul(w2, cols) + bias.data[:, None]
    out = Tensor(out_data.reshape(n, k, ho, wo))

    def fn(g: np.ndarray) -> None:
        g3 = g.reshape(n, k, ho * wo)
        _accum(weight, np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape))
        _accum(bias, g3.sum(axis=(0, 2)))
        if pointwise:
            _accum(x, np.matmul(w2.T, g3).reshape(n, c, h, w), own=True)
            return
        dcols = np.matmul(w2.T, g3).reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            for j in range(kw):
                dxp[:, :, rows, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
        if padding:
            dxp = np.ascontiguousarray(dxp[:, :, padding:-padding, padding:-padding])
        _accum(x, dxp, own=True)

    _record(out, fn)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of [N,C,H,W]."""
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))
    n, c, h, w = x.data.shape

    def fn(g: np.ndarray) -> None:
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)), own=True)

    _record(out, fn)
    return out


# --------------------------------------------------------------------------
# Normalization


def group_norm(x: Tensor, groups: int, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-group zero-mean/unit-variance normalization with per-channel affine."""
    if eps <= 0:
        raise ConfigError(f"group_norm eps must be positive, got {eps}")
    n, c, h, w = x.data.shape
    if c % groups != 0:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (xg - mu) * inv
    xhat4 = xhat.reshape(n, c, h, w)
    g4 = gain.data.reshape(1, c, 1, 1)
    out = Tensor(xhat4 * g4 + offset.data.reshape(1, c, 1, 1))

    def fn(g: np.ndarray) -> None:
        _accum(gain, (g * xhat4).sum(axis=(0, 2, 3)))
        _accum(offset, g.sum(axis=(0, 2, 3)))
        dxhat = (g * g4).reshape(n, groups, m)
        s1 = dxhat.sum(axis=2, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=2, keepdims=True)
        dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        _accum(x, np.ascontiguousarray(dx.reshape(n, c, h, w)), own=True)

    _record(out, fn)
    return out
