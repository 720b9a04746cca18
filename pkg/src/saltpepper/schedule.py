"""Diffusion coefficient tables and the time-decaying blur-width schedule.

A `Schedule` is a precomputed table over timesteps t = 1..T: the per-step
noise fractions, their complements, the running signal-retention product, and
the reverse-posterior variance. Everything is computed once at construction
so queries are O(1) and bit-stable across runs.

Timestep conventions, used consistently everywhere downstream:

- diffusion timesteps are 1-based: t in [1, T];
- the running product at t = 0 is defined as 1, which makes the posterior
  variance at t = 1 exactly zero and the final reverse step deterministic;
- the blur schedule is indexed by the *destination* timestep, 0-based:
  t in [0, T-1], with the widest blur at t = T-1 and the narrowest at t = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Schedule", "BlurConfig", "make_linear_schedule", "blur_sigma"]


@dataclass(frozen=True)
class Schedule:
    """Immutable coefficient table for a T-step diffusion process.

    Arrays are stored 0-based (index i holds the value for timestep t = i+1);
    use the ``*_t`` accessors for the 1-based timestep view.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    def _check_t(self, t, lo: int) -> int:
        if not (isinstance(t, (int, np.integer)) and lo <= t <= self.T):
            raise ValueError(f"timestep {t!r} outside [{lo}, {self.T}]")
        return int(t)

    def beta_t(self, t) -> float:
        return float(self.beta[self._check_t(t, 1) - 1])

    def alpha_t(self, t) -> float:
        return float(self.alpha[self._check_t(t, 1) - 1])

    def alpha_bar_t(self, t) -> float:
        # alpha_bar_t(0) == 1 by definition
        t = self._check_t(t, 0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_tilde_t(self, t) -> float:
        return float(self.beta_tilde[self._check_t(t, 1) - 1])


@dataclass(frozen=True)
class BlurConfig:
    """Parameters of the per-step Gaussian refinement blur.

    The kernel has fixed spatial support `kernel_size` (odd); only the
    standard deviation varies with the timestep, between `sigma_min` at the
    final step and `sigma_max` at the first.
    """

    kernel_size: int = 13
    sigma_min: float = 0.1
    sigma_max: float = 14.0

    def __post_init__(self):
        problems = []
        if (
            not isinstance(self.kernel_size, (int, np.integer))
            or self.kernel_size <= 0
            or self.kernel_size % 2 == 0
        ):
            problems.append(f"kernel_size must be an odd positive integer, got {self.kernel_size}")
        if not 0.0 <= self.sigma_min <= self.sigma_max:
            problems.append(
                f"need 0 <= sigma_min <= sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )
        if problems:
            raise ValueError("; ".join(problems))


def make_linear_schedule(T: int, beta1: float, betaT: float) -> Schedule:
    """Build the coefficient table for a linearly increasing noise schedule.

    beta rises in equal increments from `beta1` at t=1 to `betaT` at t=T
    (a single-step schedule is the constant `beta1`). Requires T >= 1 and
    0 < beta1 <= betaT < 1.
    """
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta1 <= betaT < 1.0):
        raise ValueError(f"need 0 < beta1 <= betaT < 1, got ({beta1}, {betaT})")

    beta = np.full(1, float(beta1)) if T == 1 else np.linspace(beta1, betaT, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # posterior variance; the t=1 entry is exactly 0 because the running
    # product at t=0 is 1
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta

    for arr in (beta, alpha, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return Schedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=alpha_bar, beta_tilde=beta_tilde)


def blur_sigma(cfg: BlurConfig, t, T: int) -> float:
    """Blur standard deviation at destination timestep t, for a T-step chain.

    Linear interpolation from sigma_min at t=0 to sigma_max at t=T-1;
    t must be an integer in [0, T-1] and T >= 2.
    """
    if T < 2:
        raise ValueError(f"blur schedule needs T >= 2, got {T}")
    if not (isinstance(t, (int, np.integer)) and 0 <= t <= T - 1):
        raise ValueError(f"blur timestep {t!r} outside [0, {T - 1}] or not an integer")
    return cfg.sigma_min + t * (cfg.sigma_max - cfg.sigma_min) / (T - 1)
