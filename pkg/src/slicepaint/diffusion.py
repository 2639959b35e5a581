"""Forward noising, conditional training loss, and the reverse sampling chain.

Conditioning is carried as two extra input channels that stay constant over
the whole chain.  The channel layout is fixed:

    channel 0: the noisy image x_t
    channel 1: the voided baseline b
    channel 2: the binary mask m

Sampling starts from pure Gaussian noise and walks t = T..1 with

    x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps(X_t, t))
              / sqrt(alpha_t) + sigma_t * z

where z is fresh noise, suppressed at the final step t = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .schedule import NoiseSchedule
from .tensor import DomainError, ShapeError, Tensor
from .unet import DenoiserModel

CH_NOISY = 0
CH_BASELINE = 1
CH_MASK = 2


@dataclass
class ConditionedBatch:
    """Training triples: ground-truth slices, voided baselines, binary masks."""

    x0: np.ndarray
    b: np.ndarray
    m: np.ndarray

    def __post_init__(self) -> None:
        if not (self.x0.shape == self.b.shape == self.m.shape):
            raise ShapeError(
                f"batch members disagree: x0 {self.x0.shape}, b {self.b.shape}, m {self.m.shape}"
            )
        if self.x0.ndim != 4 or self.x0.shape[1] != 1:
            raise ShapeError(f"expected [N,1,S,S] slices, got {self.x0.shape}")
        vals = np.unique(self.m)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise DomainError("mask must be binary")
        per_slice = self.m.reshape(self.m.shape[0], -1).any(axis=1)
        if not per_slice.all():
            raise DomainError("every training slice must have a non-zero mask")
        if not np.array_equal(self.b, self.x0 * (1.0 - self.m)):
            raise DomainError("baseline must equal ground truth with the mask voided")

    def __len__(self) -> int:
        return self.x0.shape[0]


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noised image at step t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} must match")
    ab = schedule.alpha_bar_t(t)
    return (np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)).astype(x0.dtype)


def q_sample_batch(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Per-item q_sample for an array of steps t[N]."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise DomainError(f"steps outside 1..{schedule.T}: {t}")
    ab = schedule.alpha_bar[t - 1].reshape(-1, 1, 1, 1)
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(x0.dtype)


def concat_condition(x_t: np.ndarray, b: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Stack (noisy, baseline, mask) along the channel axis."""
    return np.concatenate([x_t, b, m], axis=1)


def training_loss(
    model: DenoiserModel,
    batch: ConditionedBatch,
    t: np.ndarray,
    eps: np.ndarray,
    schedule: NoiseSchedule,
) -> Tensor:
    """Mean squared error between true and predicted noise.

    The caller supplies per-item steps t (uniform over 1..T) and the noise
    draw eps; the conditioned input is built here so the layout stays in one
    place.
    """
    if eps.shape != batch.x0.shape:
        raise ShapeError(f"eps {eps.shape} must match x0 {batch.x0.shape}")
    x_t = q_sample_batch(batch.x0, t, eps, schedule)
    stacked = Tensor(concat_condition(x_t, batch.b, batch.m))
    pred = model(stacked, np.asarray(t))
    diff = T.sub(Tensor(eps.astype(pred.data.dtype)), pred)
    return T.mean(T.mul(diff, diff))


def reverse_step(
    model,
    x_t: np.ndarray,
    b: np.ndarray,
    m: np.ndarray,
    t: int,
    z: np.ndarray | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One conditional denoising step from x_t to x_{t-1}.

    z is the caller's Gaussian draw; it is ignored (treated as zero) at
    t = 1 so the chain terminates noise-free.
    """
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise DomainError(f"step {t} outside 1..{schedule.T}")
    n = x_t.shape[0]
    stacked = concat_condition(x_t, b, m)
    eps_hat = model(Tensor(stacked), np.full(n, t)).data.astype(np.float64)
    alpha = schedule.alpha_t(t)
    ab = schedule.alpha_bar_t(t)
    mean = (x_t.astype(np.float64) - (1.0 - alpha) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    if t > 1 and z is not None:
        mean = mean + schedule.sigma_t(t) * z.astype(np.float64)
    return mean.astype(np.float32)


def sample_slice(
    model,
    b_i: np.ndarray,
    m_i: np.ndarray,
    schedule: NoiseSchedule,
    rng_seed: int,
) -> np.ndarray:
    """Run the full reverse chain for one conditioned slice.

    Starts from seeded N(0, I) noise and applies reverse_step for
    t = T .. 1.  One z is drawn per step with t > 1; the draw order is part
    of the determinism contract.
    """
    if not np.any(m_i):
        raise DomainError("slice has an all-zero mask; nothing to inpaint")
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal(b_i.shape, dtype=np.float32)
    for t in range(schedule.T, 0, -1):
        z = rng.standard_normal(b_i.shape, dtype=np.float32) if t > 1 else None
        x = reverse_step(model, x, b_i, m_i, t, z, schedule)
    return x


def sample_slices(
    model,
    b: np.ndarray,
    m: np.ndarray,
    schedule: NoiseSchedule,
    rng_seeds: list[int],
) -> np.ndarray:
    """Sample several independent slices in one batched chain.

    Each slice owns its generator (seeded from rng_seeds), so results do not
    depend on how slices are grouped into batches, only on the per-slice
    seeds and the model.
    """
    n = b.shape[0]
    if len(rng_seeds) != n:
        raise ShapeError(f"need {n} seeds, got {len(rng_seeds)}")
    for i in range(n):
        if not np.any(m[i]):
            raise DomainError(f"slice {i} has an all-zero mask")
    rngs = [np.random.default_rng(s) for s in rng_seeds]
    x = np.stack([r.standard_normal(b.shape[1:], dtype=np.float32) for r in rngs])
    for t in range(schedule.T, 0, -1):
        if t > 1:
            z = np.stack([r.standard_normal(b.shape[1:], dtype=np.float32) for r in rngs])
        else:
            z = None
        x = reverse_step(model, x, b, m, t, z, schedule)
    return x


def generate_unconditional(model, schedule: NoiseSchedule, seed: int, image_size: int,
                           add_noise: bool = True) -> np.ndarray:
    """Plain (unconditioned) sampling chain for a one-channel model.

    add_noise=False suppresses every z draw, leaving the deterministic part
    of the chain (useful for closed-form checks).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, image_size, image_size), dtype=np.float32)
    for t in range(schedule.T, 0, -1):
        eps_hat = model(Tensor(x), np.array([t])).data.astype(np.float64)
        alpha = schedule.alpha_t(t)
        ab = schedule.alpha_bar_t(t)
        mean = (x.astype(np.float64) - (1.0 - alpha) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
        if t > 1 and add_noise:
            z = rng.standard_normal(x.shape, dtype=np.float32)
            mean = mean + schedule.sigma_t(t) * z.astype(np.float64)
        x = mean.astype(np.float32)
    return x
