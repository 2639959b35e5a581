"""Conditional noise-prediction U-Net.

The network maps a channel-stacked input (noisy slice, voided baseline,
mask) and an integer step to a one-channel noise estimate.  Structure:
encoder/decoder with skip connections, residual blocks fed a projected
sinusoidal step embedding, self-attention at configured spatial sizes, and
a zero-initialized final convolution so a freshly built model predicts
exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ConfigError, DomainError, Tensor


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    res_blocks_per_level: int = 1
    attention_resolutions: tuple[int, ...] = (16,)
    heads: int = 1
    time_embed_dim: int = 128
    input_channels: int = 3
    output_channels: int = 1

    def validate(self) -> None:
        levels = len(self.channel_multipliers)
        if levels < 1 or any(m < 1 for m in self.channel_multipliers):
            raise ConfigError(f"channel_multipliers must be positive, got {self.channel_multipliers}")
        if self.image_size % (1 << (levels - 1)) != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{levels - 1} "
                f"for {levels} resolution levels"
            )
        reached = self.level_resolutions()
        for res in self.attention_resolutions:
            if res not in reached:
                raise ConfigError(
                    f"attention resolution {res} is never reached; path visits {sorted(reached)}"
                )
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 3 (conditioned) or 1, got {self.input_channels}")
        if self.res_blocks_per_level < 1:
            raise ConfigError("res_blocks_per_level must be >= 1")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        for mult in self.channel_multipliers:
            ch = self.base_channels * mult
            if ch % self.heads != 0:
                raise ConfigError(f"{ch} channels not divisible by {self.heads} attention heads")

    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(self.image_size >> i for i in range(len(self.channel_multipliers)))

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "res_blocks_per_level": self.res_blocks_per_level,
            "attention_resolutions": list(self.attention_resolutions),
            "heads": self.heads,
            "time_embed_dim": self.time_embed_dim,
            "input_channels": self.input_channels,
            "output_channels": self.output_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        return UNetConfig(
            image_size=int(d["image_size"]),
            base_channels=int(d["base_channels"]),
            channel_multipliers=tuple(int(m) for m in d["channel_multipliers"]),
            res_blocks_per_level=int(d["res_blocks_per_level"]),
            attention_resolutions=tuple(int(r) for r in d["attention_resolutions"]),
            heads=int(d["heads"]),
            time_embed_dim=int(d["time_embed_dim"]),
            input_channels=int(d["input_channels"]),
            output_channels=int(d["output_channels"]),
        )


class _UNet(nn.Module):
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        attn = set(cfg.attention_resolutions)
        emb_dim = cfg.time_embed_dim

        self.time_mlp1 = nn.Linear(emb_dim, emb_dim, rng)
        self.time_mlp2 = nn.Linear(emb_dim, emb_dim, rng)
        self.in_conv = nn.Conv2d(cfg.input_channels, base, 3, rng)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        self._down_plan: list[tuple[int, bool]] = []  # (n blocks, has downsample)
        skip_channels = [base]
        ch = base
        res = cfg.image_size
        levels = len(cfg.channel_multipliers)
        for i, mult in enumerate(cfg.channel_multipliers):
            cout = base * mult
            for _ in range(cfg.res_blocks_per_level):
                self.down_blocks.append(nn.ResBlock(ch, cout, emb_dim, rng))
                ch = cout
                if res in attn:
                    self.down_attn.append(nn.SelfAttention2d(ch, cfg.heads, rng))
                else:
                    self.down_attn.append(_Identity())
                skip_channels.append(ch)
            last = i == levels - 1
            self._down_plan.append((cfg.res_blocks_per_level, not last))
            if not last:
                self.downsamples.append(nn.Downsample(ch, rng))
                skip_channels.append(ch)
                res //= 2

        self.mid_block1 = nn.ResBlock(ch, ch, emb_dim, rng)
        self.mid_attn = nn.SelfAttention2d(ch, cfg.heads, rng) if res in attn else _Identity()
        self.mid_block2 = nn.ResBlock(ch, ch, emb_dim, rng)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(levels)):
            cout = base * cfg.channel_multipliers[i]
            for _ in range(cfg.res_blocks_per_level + 1):
                self.up_blocks.append(nn.ResBlock(ch + skip_channels.pop(), cout, emb_dim, rng))
                ch = cout
                if res in attn:
                    self.up_attn.append(nn.SelfAttention2d(ch, cfg.heads, rng))
                else:
                    self.up_attn.append(_Identity())
            if i > 0:
                self.upsamples.append(nn.Upsample(ch, rng))
                res *= 2

        self.out_norm = nn.GroupNorm(ch)
        self.out_conv = nn.Conv2d(ch, cfg.output_channels, 3, rng, zero_init=True)

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        emb = self.time_mlp2(T.silu(self.time_mlp1(emb)))
        h = self.in_conv(x)
        skips = [h]
        bi = 0
        di = 0
        for n_blocks, has_down in self._down_plan:
            for _ in range(n_blocks):
                h = self.down_attn[bi](self.down_blocks[bi](h, emb))
                skips.append(h)
                bi += 1
            if has_down:
                h = self.downsamples[di](h)
                skips.append(h)
                di += 1

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, emb)), emb)

        bi = 0
        ui = 0
        levels = len(self._down_plan)
        for idx, (n_blocks, _) in enumerate(reversed(self._down_plan)):
            for _ in range(n_blocks + 1):
                h = T.concat([h, skips.pop()], axis=1)
                h = self.up_attn[bi](self.up_blocks[bi](h, emb))
                bi += 1
            if idx < levels - 1:
                h = self.upsamples[ui](h)
                ui += 1

        return self.out_conv(T.silu(self.out_norm(h)))


class _Identity(nn.Module):
    def __call__(self, x: Tensor, *args) -> Tensor:
        return x


@dataclass
class DenoiserModel:
    """Built network plus its configuration; callable as eps(X, t)."""

    config: UNetConfig
    net: _UNet
    max_period: float = 10000.0

    def __call__(self, x: Tensor | np.ndarray, t: np.ndarray) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        emb = nn.time_embedding_batch(np.atleast_1d(t), self.config.time_embed_dim, self.max_period)
        return self.net(x, Tensor(emb.astype(x.data.dtype)))

    def parameters(self):
        return self.net.parameters()

    def named_parameters(self):
        return self.net.named_parameters()

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def build(config: UNetConfig, seed: int) -> DenoiserModel:
    """Construct a denoiser with deterministic seed-derived initialization."""
    config.validate()
    rng = np.random.default_rng(seed)
    net = _UNet(config, rng)
    net.assign_names()
    return DenoiserModel(config=config, net=net)


def predict_noise(model: DenoiserModel, x: Tensor | np.ndarray, t: np.ndarray, t_max: int | None = None) -> Tensor:
    """One forward pass of the denoiser on a batch of stacked inputs."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    s = model.config.image_size
    if data.ndim != 4 or data.shape[1] != model.config.input_channels or data.shape[2:] != (s, s):
        raise T.ShapeError(
            f"expected input [N,{model.config.input_channels},{s},{s}], got {data.shape}"
        )
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 1) or (t_max is not None and np.any(t > t_max)):
        raise DomainError(f"step indices must lie in 1..{t_max if t_max else 'T'}, got {t}")
    return model(x, t)
