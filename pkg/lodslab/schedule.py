"""Variance-preserving noise schedules and the forward noising process."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from lodslab.gradcore import Tensor, as_tensor
from lodslab.utils import ScheduleError, ShapeError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear-beta", "cosine")

# DDPM betas are per-step rates at this many steps; the continuous form
# keeps their meaning for any T
_REFERENCE_STEPS = 1000

Timestep = Union[int, np.integer, np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    alphas: np.ndarray
    sigmas: np.ndarray
    loss_weight: np.ndarray
    beta_min: float = 1e-4
    beta_max: float = 2e-2

    def check_timestep(self, t: Timestep) -> np.ndarray:
        arr = np.asarray(t)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ScheduleError(f"Timesteps must be integers, got dtype {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.T):
            raise ScheduleError(f"Timestep out of range [0, {self.T}): {t}")
        return arr

    def coefficients(self, t: Timestep, ndim: int, dtype=np.float64) -> Tuple[np.ndarray, np.ndarray]:
        """alpha_t and sigma_t shaped to broadcast against an ``ndim`` array."""
        arr = self.check_timestep(t)
        shape = arr.shape + (1,) * max(ndim - arr.ndim, 0)
        return (
            self.alphas[arr].reshape(shape).astype(dtype),
            self.sigmas[arr].reshape(shape).astype(dtype),
        )

    def weight(self, t: Timestep, ndim: int) -> np.ndarray:
        arr = self.check_timestep(t)
        return self.loss_weight[arr].reshape(arr.shape + (1,) * max(ndim - arr.ndim, 0))


def _linear_integral(fraction, beta_min, beta_max):
    b0 = beta_min * _REFERENCE_STEPS
    b1 = beta_max * _REFERENCE_STEPS
    return b0 * fraction + 0.5 * (b1 - b0) * fraction**2


def _continuous_alpha(kind, fraction, beta_min, beta_max):
    if kind == "cosine":
        return np.cos(0.5 * math.pi * np.asarray(fraction, dtype=np.float64))
    return np.exp(-0.5 * _linear_integral(np.asarray(fraction, dtype=np.float64), beta_min, beta_max))


def _continuous_sigma(kind, fraction, beta_min, beta_max):
    if kind == "cosine":
        return np.sin(0.5 * math.pi * np.asarray(fraction, dtype=np.float64))
    return np.sqrt(-np.expm1(-_linear_integral(np.asarray(fraction, dtype=np.float64), beta_min, beta_max)))


def make_schedule(
    kind: str = "linear-beta",
    T: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 2e-2,
    loss_weight: Optional[np.ndarray] = None,
) -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"Unknown schedule kind '{kind}', expected one of {SCHEDULE_KINDS}")
    if T < 2:
        raise ScheduleError(f"Schedule needs T >= 2, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ScheduleError(f"Need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")

    fractions = np.arange(T, dtype=np.float64) / (T - 1)
    alphas = _continuous_alpha(kind, fractions, beta_min, beta_max)
    sigmas = _continuous_sigma(kind, fractions, beta_min, beta_max)
    if loss_weight is None:
        weights = np.ones(T, dtype=np.float64)
    else:
        weights = np.asarray(loss_weight, dtype=np.float64)
        if weights.shape != (T,):
            raise ScheduleError(f"loss_weight must have shape ({T},), got {weights.shape}")

    _validate(kind, alphas, sigmas)
    for arr in (alphas, sigmas, weights):
        arr.setflags(write=False)
    logger.debug(f"Built {kind} schedule T={T} sigma_end={sigmas[-1]:.6f}")
    return NoiseSchedule(T, kind, alphas, sigmas, weights, beta_min, beta_max)


def _validate(kind, alphas, sigmas):
    vp = np.abs(alphas**2 + sigmas**2 - 1.0).max()
    if vp > 1e-6:
        raise ScheduleError(f"{kind}: alpha^2 + sigma^2 deviates from 1 by {vp:.3e}")
    if not (np.all(np.diff(sigmas) > 0) and np.all(np.diff(alphas) < 0)):
        raise ScheduleError(f"{kind}: sigma must increase and alpha decrease strictly in t")
    if alphas[0] < 0.999:
        raise ScheduleError(f"{kind}: alpha_0 = {alphas[0]:.6f} < 0.999")
    if sigmas[-1] < 0.99:
        raise ScheduleError(
            f"{kind}: sigma_T = {sigmas[-1]:.6f} < 0.99; raise beta_max to reach near-pure noise"
        )


def add_noise(s: NoiseSchedule, x: Tensor, t: Timestep, eps) -> Tensor:
    """z_t = alpha_t * x + sigma_t * eps, differentiable in x."""
    x = as_tensor(x)
    eps = as_tensor(eps, like=x)
    if eps.shape != x.shape:
        raise ShapeError(f"add_noise: noise shape {eps.shape} does not match x shape {x.shape}")
    steps = s.check_timestep(t)
    alpha, sigma = s.coefficients(steps, x.ndim, dtype=x.dtype)
    if steps.ndim == 0:
        return x * float(alpha.reshape(-1)[0]) + eps * float(sigma.reshape(-1)[0])
    batch = x.shape[0] if x.ndim else 0
    if alpha.shape[0] != batch:
        raise ShapeError(f"add_noise: {alpha.shape[0]} timesteps for a batch of {batch}")
    return x * alpha + eps * sigma


@dataclass(frozen=True)
class TimestepPolicy:
    """Uniform integer timesteps between fractions [t_min, t_max] of T."""

    t_min: float = 0.02
    t_max: float = 0.98

    def bounds(self, T: int) -> Tuple[int, int]:
        if not 0.0 <= self.t_min <= self.t_max <= 1.0:
            raise ScheduleError(f"Empty timestep range [{self.t_min}, {self.t_max}]")
        lo = int(round(self.t_min * T))
        hi = min(int(round(self.t_max * T)), T - 1)
        if lo > hi:
            raise ScheduleError(f"Empty timestep range [{self.t_min}, {self.t_max}] for T={T}")
        return lo, hi


def sample_timestep(policy: TimestepPolicy, rng: np.random.Generator, T: int, size=None):
    lo, hi = policy.bounds(T)
    draw = rng.integers(lo, hi, size=size, endpoint=True)
    return int(draw) if size is None else draw
