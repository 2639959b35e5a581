"""Optimization loop: Adam updates, parameter averaging, checkpointing.

Every step draws its batch indices, step indices, and noise from a
generator seeded by (run seed, step number), so a resumed run replays the
exact noise stream of an uninterrupted one.  Checkpoints carry raw and
averaged parameters plus the optimizer moments, and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import diffusion
from .schedule import NoiseSchedule, linear_schedule
from .tensor import ConfigError, Parameter, Tape, backward
from .unet import DenoiserModel, UNetConfig, build

CHECKPOINT_MAGIC = b"DFIP"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when an optimization step cannot proceed."""


class CheckpointError(IOError):
    """Raised for malformed, truncated, or inconsistent checkpoint files."""


class Adam:
    """Adam with bias correction; gradients are zeroed after each step."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in parameter '{p.name}'; step aborted")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()


class Ema:
    """Exponential moving average of parameters (shadow copies)."""

    def __init__(self, params: list[Parameter], rate: float = 0.9999) -> None:
        if not 0.0 < rate < 1.0:
            raise ConfigError(f"EMA rate must lie in (0, 1), got {rate}")
        self.rate = rate
        self.params = params
        self.shadow = [p.data.copy() for p in params]

    def update(self) -> None:
        # delta form: exact fixed point when shadow == param, and the new
        # shadow always lies between the old shadow and the parameter
        r = self.rate
        for s, p in zip(self.shadow, self.params):
            s += (1.0 - r) * (p.data - s)


@dataclass
class TrainerConfig:
    batch_size: int = 8
    lr: float = 1e-4
    ema_rate: float = 0.9999
    steps: int = 3000
    checkpoint_interval: int = 500
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class SliceDataset:
    """Stacked training slices: ground truth, voided baseline, mask."""

    x0: np.ndarray
    b: np.ndarray
    m: np.ndarray

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def slice_size(self) -> int:
        return self.x0.shape[-1]


@dataclass
class Checkpoint:
    format_version: int
    config: UNetConfig
    T: int
    beta_start: float
    beta_end: float
    step_count: int
    seed: int
    params: dict[str, np.ndarray]
    ema_params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step_count: int = 0

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)


def make_checkpoint(model: DenoiserModel, schedule: NoiseSchedule, cfg: TrainerConfig,
                    step: int, adam: Adam, ema: Ema) -> Checkpoint:
    names = [name for name, _ in model.named_parameters()]
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    return Checkpoint(
        format_version=CHECKPOINT_VERSION,
        config=model.config,
        T=schedule.T,
        beta_start=schedule.beta_start,
        beta_end=schedule.beta_end,
        step_count=step,
        seed=cfg.seed,
        params=params,
        ema_params={n: s.copy() for n, s in zip(names, ema.shadow)},
        adam_m={n: m.copy() for n, m in zip(names, adam.first_moment)},
        adam_v={n: v.copy() for n, v in zip(names, adam.second_moment)},
        adam_step_count=adam.step_count,
    )


def train(
    dataset: SliceDataset,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cfg: TrainerConfig,
    start_step: int = 0,
    adam: Adam | None = None,
    ema: Ema | None = None,
    log: Callable[[str], None] | None = None,
) -> Iterator[Checkpoint]:
    """Run the optimization loop, yielding checkpoints at the configured cadence.

    Per step, in this order, a generator seeded by (seed, step) draws batch
    indices, per-item steps t, and the noise eps.  The run is a pure
    function of (dataset, configs, seed).
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("training dataset is empty")
    if adam is None:
        adam = Adam(model.parameters(), lr=cfg.lr,
                    beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    if ema is None:
        ema = Ema(model.parameters(), rate=cfg.ema_rate)
    s = dataset.slice_size
    t_start = time.monotonic()
    for step in range(start_step + 1, cfg.steps + 1):
        rng = np.random.default_rng((cfg.seed, step))
        idx = rng.integers(0, n, size=cfg.batch_size)
        t = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, 1, s, s), dtype=np.float32)
        batch = diffusion.ConditionedBatch(
            x0=dataset.x0[idx], b=dataset.b[idx], m=dataset.m[idx]
        )
        with Tape() as tape:
            loss = diffusion.training_loss(model, batch, t, eps, schedule)
        backward(loss, tape)
        adam.step()
        ema.update()
        if log is not None:
            log(f"step={step} loss={loss.item():.6f} wall={time.monotonic() - t_start:.1f}")
        if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
            yield make_checkpoint(model, schedule, cfg, step, adam, ema)


# --------------------------------------------------------------------------
# Persistence

_SECTION_ATTRS = {
    "params": "params",
    "ema": "ema_params",
    "adam_m": "adam_m",
    "adam_v": "adam_v",
}


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write the binary checkpoint atomically (temp file + rename).

    Layout: magic "DFIP", u32 version, u64 length-prefixed JSON metadata,
    then raw little-endian float32 blobs in manifest order, section by
    section: raw parameters, EMA parameters, then optimizer moments.
    """
    manifest = [[name, list(arr.shape)] for name, arr in ckpt.params.items()]
    sections = ["params", "ema"]
    if ckpt.adam_m:
        sections += ["adam_m", "adam_v"]
    meta = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "schedule": {"T": ckpt.T, "beta_start": ckpt.beta_start, "beta_end": ckpt.beta_end},
        "step_count": ckpt.step_count,
        "seed": ckpt.seed,
        "adam_step_count": ckpt.adam_step_count,
        "manifest": manifest,
        "sections": sections,
    }
    blob = json.dumps(meta).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for section in sections:
            store = getattr(ckpt, _SECTION_ATTRS[section])
            for name, _ in manifest:
                f.write(np.ascontiguousarray(store[name], dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<Q", raw, 8)
    meta_end = 16 + meta_len
    if len(raw) < meta_end:
        raise CheckpointError(f"{path}: truncated metadata (need {meta_end} bytes, have {len(raw)})")
    meta = json.loads(raw[16:meta_end].decode("utf-8"))
    config = UNetConfig.from_dict(meta["config"])
    manifest = [(name, tuple(shape)) for name, shape in meta["manifest"]]
    sections = meta["sections"]

    stores: dict[str, dict[str, np.ndarray]] = {s: {} for s in sections}
    offset = meta_end
    for section in sections:
        for name, shape in manifest:
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 4
            if offset + nbytes > len(raw):
                raise CheckpointError(
                    f"{path}: truncated at byte {len(raw)} while reading "
                    f"section '{section}' entry '{name}' (needs bytes {offset}..{offset + nbytes})"
                )
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
            stores[section][name] = arr.copy()
            offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after parameter blobs")

    return Checkpoint(
        format_version=int(meta["format_version"]),
        config=config,
        T=int(meta["schedule"]["T"]),
        beta_start=float(meta["schedule"]["beta_start"]),
        beta_end=float(meta["schedule"]["beta_end"]),
        step_count=int(meta["step_count"]),
        seed=int(meta["seed"]),
        params=stores["params"],
        ema_params=stores["ema"],
        adam_m=stores.get("adam_m", {}),
        adam_v=stores.get("adam_v", {}),
        adam_step_count=int(meta.get("adam_step_count", meta["step_count"])),
    )


def model_from_checkpoint(ckpt: Checkpoint, use_ema: bool = True) -> DenoiserModel:
    """Instantiate the network and load one parameter set into it."""
    model = build(ckpt.config, seed=0)
    store = ckpt.ema_params if use_ema else ckpt.params
    names = {name for name, _ in model.named_parameters()}
    if names != set(store):
        missing = names - set(store)
        extra = set(store) - names
        raise CheckpointError(
            f"parameter set does not match config: missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]}"
        )
    for name, p in model.named_parameters():
        if p.data.shape != store[name].shape:
            raise CheckpointError(
                f"parameter '{name}': checkpoint shape {store[name].shape} "
                f"!= model shape {p.data.shape}"
            )
        p.set_data(store[name].copy())
    return model


def resume_state(ckpt: Checkpoint, model: DenoiserModel, cfg: TrainerConfig) -> tuple[Adam, Ema]:
    """Rebuild optimizer and averaging state from a checkpoint."""
    adam = Adam(model.parameters(), lr=cfg.lr,
                beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    adam.step_count = ckpt.adam_step_count
    names = [name for name, _ in model.named_parameters()]
    if ckpt.adam_m:
        adam.first_moment = [ckpt.adam_m[n].copy() for n in names]
        adam.second_moment = [ckpt.adam_v[n].copy() for n in names]
    ema = Ema(model.parameters(), rate=cfg.ema_rate)
    ema.shadow = [ckpt.ema_params[n].copy() for n in names]
    return adam, ema
