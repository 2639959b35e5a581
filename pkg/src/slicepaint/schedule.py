"""Diffusion coefficient tables.

A schedule precomputes, for steps t = 1..T, the per-step noise variance
beta_t, the retention factor alpha_t = 1 - beta_t, the cumulative product
alpha_bar_t, and the sampling noise scale sigma_t with sigma_t^2 = beta_t.
Arrays are float64 and immutable after construction; step indices are
1-based everywhere in the public API.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, DomainError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise DomainError(f"step {t} outside 1..{self.T}")
        return t

    def beta_t(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_t(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_t(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t) - 1])

    def sigma_t(self, t: int) -> float:
        return float(self.sigma[self._check_t(t) - 1])


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Schedule with beta interpolated linearly from beta_start to beta_end."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"beta endpoints must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    beta.flags.writeable = False
    alpha.flags.writeable = False
    alpha_bar.flags.writeable = False
    sigma.flags.writeable = False
    return NoiseSchedule(
        T=T, beta_start=beta_start, beta_end=beta_end,
        beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma,
    )


def default_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """Canonical linear schedule, endpoints rescaled when T != 1000.

    The defaults 1e-4 .. 0.02 are calibrated for T = 1000; for other step
    counts the endpoints are scaled by 1000/T (clamped below 0.999) so the
    total amount of injected noise stays comparable.
    """
    factor = DEFAULT_T / T
    start = min(DEFAULT_BETA_START * factor, 0.999)
    end = min(DEFAULT_BETA_END * factor, 0.999)
    return linear_schedule(T, start, end)
