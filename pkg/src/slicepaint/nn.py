"""Network building blocks assembled from the autodiff primitives."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ConfigError, Parameter, Tensor


class Module:
    """Minimal container tracking parameters and child modules in order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value) -> None:
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, p in self._params.items():
            out.append((f"{prefix}{key}", p))
        for key, mod in self._modules.items():
            out.extend(mod.named_parameters(prefix=f"{prefix}{key}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def assign_names(self, prefix: str = "") -> None:
        """Stamp each parameter with its hierarchical name."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def cast(self, dtype) -> "Module":
        """Cast every parameter in place (float64 is used by gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


class ModuleList(Module):
    def __init__(self, mods=()) -> None:
        super().__init__()
        self._items: list[Module] = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> None:
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    """3x3/1x1 convolution with fan-in-scaled uniform init, optional zero init."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, zero_init: bool = False) -> None:
        super().__init__()
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        if zero_init:
            self.weight = Parameter(np.zeros((cout, cin, kernel, kernel), dtype=np.float32))
            self.bias = Parameter(np.zeros(cout, dtype=np.float32))
        else:
            self.weight = Parameter(_uniform_init(rng, (cout, cin, kernel, kernel), fan_in))
            self.bias = Parameter(_uniform_init(rng, (cout,), fan_in))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, zero_init: bool = False) -> None:
        super().__init__()
        if zero_init:
            self.weight = Parameter(np.zeros((fout, fin), dtype=np.float32))
            self.bias = Parameter(np.zeros(fout, dtype=np.float32))
        else:
            self.weight = Parameter(_uniform_init(rng, (fout, fin), fin))
            self.bias = Parameter(_uniform_init(rng, (fout,), fin))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def default_groups(channels: int) -> int:
    """8 groups as the norm default, falling back to one group per channel."""
    return 8 if channels >= 8 else channels


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5) -> None:
        super().__init__()
        self.groups = default_groups(channels) if groups is None else groups
        if channels % self.groups != 0:
            raise ConfigError(f"{channels} channels not divisible by {self.groups} groups")
        self.eps = eps
        self.gain = Parameter(np.ones(channels, dtype=np.float32))
        self.offset = Parameter(np.zeros(channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gain, self.offset, self.eps)


def time_embedding(t: int, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of an integer step: [sin(t*w_k) | cos(t*w_k)].

    w_k = max_period ** (-2k / dim) for k in 0 .. dim/2 - 1.
    """
    if dim % 2 != 0:
        raise ConfigError(f"time embedding dimension must be even, got {dim}")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = max_period ** (-2.0 * k / dim)
    ang = t * omega
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


def time_embedding_batch(ts: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    if dim % 2 != 0:
        raise ConfigError(f"time embedding dimension must be even, got {dim}")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = max_period ** (-2.0 * k / dim)
    ang = np.asarray(ts, dtype=np.float64)[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class SelfAttention2d(Module):
    """Single/multi-head scaled dot-product attention over spatial positions.

    Pre-normalized: the query/key/value projections read a group-normalized
    copy of the input, and the projected attention output is added back to
    the raw input (residual connection).
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator) -> None:
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = GroupNorm(channels)
        self.qkv = Conv2d(channels, 3 * channels, 1, rng)
        self.proj = Conv2d(channels, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.data.shape
        hd = self.heads
        d = c // hd
        tokens = h * w
        qkv = self.qkv(self.norm(x))
        q = T.slice_axis(qkv, 1, 0, c)
        k = T.slice_axis(qkv, 1, c, 2 * c)
        v = T.slice_axis(qkv, 1, 2 * c, 3 * c)
        # [N,C,H,W] -> [N*heads, tokens, d]
        def to_tokens(t: Tensor) -> Tensor:
            t = T.reshape(t, (n * hd, d, tokens))
            return T.transpose(t, (0, 2, 1))

        qt = to_tokens(q)
        kt = T.reshape(k, (n * hd, d, tokens))
        vt = to_tokens(v)
        att = T.softmax(T.scale(T.matmul(qt, kt), 1.0 / math.sqrt(d)), axis=-1)
        mixed = T.matmul(att, vt)  # [N*heads, tokens, d]
        mixed = T.transpose(mixed, (0, 2, 1))
        mixed = T.reshape(mixed, (n, c, h, w))
        return T.add(x, self.proj(mixed))


class ResBlock(Module):
    """Residual block with per-block injection of the time embedding."""

    def __init__(self, cin: int, cout: int, emb_dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.emb_proj = Linear(emb_dim, cout, rng)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        e = self.emb_proj(T.silu(emb))
        h = T.add(h, T.reshape(e, (e.data.shape[0], e.data.shape[1], 1, 1)))
        h = self.conv2(T.silu(self.norm2(h)))
        res = x if self.skip is None else self.skip(x)
        return T.add(h, res)


class Downsample(Module):
    """2x spatial reduction via a stride-2 convolution."""

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng, stride=2, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    """2x nearest-neighbor upsampling followed by a 3x3 convolution."""

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample2x(x))
