"""Forward (noising) process and conditioning-channel assembly.

Noise only ever touches heatmap channels. The reference image rides along
clean, attached by channel-wise concatenation in front of the noisy state,
at train and test time alike.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heatmap import TAG_DIFFUSION, TAG_RAW, HeatmapStack
from .schedule import Schedule

__all__ = [
    "ReferenceImage",
    "NoiseDraw",
    "q_sample",
    "q_step",
    "concat_condition",
    "split_condition",
    "channel_dropout",
]


@dataclass(frozen=True)
class ReferenceImage:
    """Conditioning image, (channels, height, width), values in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"reference image must be (c, h, w), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("reference image contains non-finite values")
        if v.size and (v.min() < -1.0 or v.max() > 1.0):
            raise ValueError("reference image values must lie in [-1, 1]")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class NoiseDraw:
    """A standard-normal draw shaped like the stack it will be mixed into."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


def _check_t(t, T: int) -> int:
    if not (isinstance(t, (int, np.integer)) and 1 <= t <= T):
        raise ValueError(f"timestep {t!r} outside [1, {T}]")
    return int(t)


def q_sample(x0: HeatmapStack, t, eps: NoiseDraw, sched: Schedule) -> HeatmapStack:
    """Jump straight to the noisy state at timestep t.

    Returns x0 * sqrt(abar_t) + eps * sqrt(1 - abar_t) as a raw-tagged stack.
    """
    x0.require_tag(TAG_DIFFUSION)
    t = _check_t(t, sched.T)
    if eps.values.shape != x0.values.shape:
        raise ValueError(f"noise shape {eps.values.shape} != target shape {x0.values.shape}")
    ab = sched.alpha_bar_t(t)
    return HeatmapStack(x0.values * np.sqrt(ab) + eps.values * np.sqrt(1.0 - ab), TAG_RAW)


def q_step(x_prev: HeatmapStack, t, sched: Schedule, rng) -> HeatmapStack:
    """One step of the noising chain: scale by sqrt(1 - beta_t) and add
    sqrt(beta_t)-scaled fresh standard-normal noise."""
    t = _check_t(t, sched.T)
    b = sched.beta_t(t)
    z = rng.standard_normal(x_prev.values.shape)
    return HeatmapStack(x_prev.values * np.sqrt(1.0 - b) + z * np.sqrt(b), TAG_RAW)


def concat_condition(y: ReferenceImage, x_t: HeatmapStack) -> np.ndarray:
    """Stack image channels first, heatmap channels after: the model input."""
    if (y.height, y.width) != (x_t.height, x_t.width):
        raise ValueError(
            f"reference {y.height}x{y.width} does not match heatmap {x_t.height}x{x_t.width}"
        )
    return np.concatenate([y.values, x_t.values], axis=0)


def split_condition(combined: np.ndarray, image_channels: int):
    """Inverse of `concat_condition`: (image values, heatmap values)."""
    return combined[:image_channels], combined[image_channels:]


def channel_dropout(x0: HeatmapStack, p: float, rng) -> HeatmapStack:
    """Independently blank each channel to the diffusion background (-1)
    with probability p. Applied to the noising input only; targets keep the
    clean stack."""
    x0.require_tag(TAG_DIFFUSION)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    mask = rng.random(x0.channels) < p
    if not mask.any():
        return HeatmapStack(x0.values.copy(), TAG_DIFFUSION)
    values = x0.values.copy()
    values[mask] = -1.0
    return HeatmapStack(values, TAG_DIFFUSION)
