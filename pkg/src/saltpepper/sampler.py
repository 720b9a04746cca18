"""Reverse-chain sampling.

Generation starts from pure Gaussian noise over the heatmap channels and
walks the chain backwards, conditioning every step on the clean reference
image. Each step asks the denoiser for a clean-stack estimate, sharpens it
with the timestep-scheduled Gaussian blur, and draws the next state from the
closed-form posterior around that estimate. The blur width is evaluated at
the step being produced, so the emitted stack carries the narrowest blur.

The single-step shortcut skips the walk: one denoiser call at the last
timestep, blurred the same way the full chain would blur its first estimate.
Under the same rng the two agree bit for bit on that first prediction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from .denoiser import eps_to_x0
from .forward import ReferenceImage, concat_condition
from .heatmap import TAG_RAW, HeatmapStack, blur, spatial_softmax
from .schedule import BlurConfig, Schedule, blur_sigma

RngLike = Union[int, np.random.Generator]


@dataclass(frozen=True)
class SampleTrajectory:
    """Full record of one reverse chain: states x_T..x_0 and the blurred
    clean-stack estimate behind each transition."""

    states: List[HeatmapStack]
    predictions: List[HeatmapStack]
    seed: Optional[int]


@dataclass(frozen=True)
class SampleResult:
    """Sampled stack plus its per-channel softmax rendering."""

    x0: HeatmapStack
    probs: HeatmapStack
    trajectory: Optional[SampleTrajectory]


def _check_step(t, T: int) -> int:
    if not (isinstance(t, (int, np.integer)) and 1 <= t <= T):
        raise ValueError(f"timestep {t!r} outside [1, {T}]")
    return int(t)


def posterior_mean_from_x0(x_t: HeatmapStack, x0_hat: HeatmapStack, t, sched: Schedule) -> HeatmapStack:
    """Posterior mean written in terms of a clean-signal estimate.

    At t=1 the coefficient on x_t vanishes, so the mean is the estimate
    itself.
    """
    t = _check_step(t, sched.T)
    if t == 1:
        # the x_t coefficient is exactly 0 and the x0 coefficient exactly 1;
        # evaluating the quotients would leave ~1e-13 of rounding behind
        return HeatmapStack(x0_hat.values.copy(), TAG_RAW)
    ab_prev = sched.alpha_bar_t(t - 1)
    ab = sched.alpha_bar_t(t)
    beta = sched.beta_t(t)
    c_xt = np.sqrt(sched.alpha_t(t)) * (1.0 - ab_prev) / (1.0 - ab)
    c_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    return HeatmapStack(c_xt * x_t.values + c_x0 * x0_hat.values, TAG_RAW)


def posterior_mean_from_eps(x_t: HeatmapStack, eps_hat: HeatmapStack, t, sched: Schedule) -> HeatmapStack:
    """Posterior mean written in terms of a noise estimate."""
    t = _check_step(t, sched.T)
    ab = sched.alpha_bar_t(t)
    beta = sched.beta_t(t)
    values = (x_t.values - eps_hat.values * beta / np.sqrt(1.0 - ab)) / np.sqrt(sched.alpha_t(t))
    return HeatmapStack(values, TAG_RAW)


def _predict_x0(d, y: ReferenceImage, x_t: HeatmapStack, t: int, sched: Schedule) -> HeatmapStack:
    """One denoiser call, converted to a clean-stack estimate if needed."""
    out = d.predict(concat_condition(y, x_t), t)
    if d.predicts_x0:
        return out
    return eps_to_x0(x_t, out, t, sched)


def reverse_step(
    d,
    y: ReferenceImage,
    x_t: HeatmapStack,
    t,
    sched: Schedule,
    cfg: BlurConfig,
    rng: np.random.Generator,
) -> Tuple[HeatmapStack, HeatmapStack]:
    """One transition x_t -> x_{t-1}.

    Returns the new state and the blurred clean-stack estimate that produced
    it. The destination timestep t-1 picks the blur width; the t=1 step adds
    no noise, so the chain ends exactly on its last estimate.
    """
    t = _check_step(t, sched.T)
    x0_hat = _predict_x0(d, y, x_t, t, sched)
    sigma = blur_sigma(cfg, t - 1, sched.T) if sched.T >= 2 else cfg.sigma_min
    x0_blurred = blur(x0_hat, sigma, cfg.kernel_size)
    mu = posterior_mean_from_x0(x_t, x0_blurred, t, sched)
    if t == 1:
        return mu, x0_blurred
    z = rng.standard_normal(x_t.values.shape)
    values = mu.values + np.sqrt(sched.beta_tilde_t(t)) * z
    return HeatmapStack(values, TAG_RAW), x0_blurred


def _resolve_rng(rng: RngLike) -> Tuple[np.random.Generator, Optional[int]]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    seed = int(rng)
    return np.random.default_rng(seed), seed


def sample_multistep(
    d,
    y: ReferenceImage,
    sched: Schedule,
    cfg: BlurConfig,
    rng: RngLike,
    keep_trajectory: bool = False,
) -> SampleResult:
    """Run the full reverse chain from a standard-normal start.

    `rng` is an integer seed or a ready generator; seeds are recorded on the
    trajectory, generators are not reconstructible and record None.
    """
    gen, seed = _resolve_rng(rng)
    x = HeatmapStack(gen.standard_normal((d.out_channels, y.height, y.width)), TAG_RAW)
    states = [x]
    predictions = []
    for t in range(sched.T, 0, -1):
        x, pred = reverse_step(d, y, x, t, sched, cfg, gen)
        if keep_trajectory:
            states.append(x)
            predictions.append(pred)
    trajectory = SampleTrajectory(states, predictions, seed) if keep_trajectory else None
    return SampleResult(x, spatial_softmax(x), trajectory)


def sample_singlestep(
    d,
    y: ReferenceImage,
    sched: Schedule,
    cfg: BlurConfig,
    rng: RngLike,
) -> SampleResult:
    """One denoiser call on pure noise at the last timestep.

    Only valid for clean-stack parameterization; converting a noise estimate
    through the near-zero signal fraction at t=T would amplify it to
    uselessness, so that case is rejected.
    """
    if not d.predicts_x0:
        raise ValueError("single-step sampling requires a denoiser that predicts the clean stack")
    gen, _ = _resolve_rng(rng)
    x_T = HeatmapStack(gen.standard_normal((d.out_channels, y.height, y.width)), TAG_RAW)
    x0_hat = d.predict(concat_condition(y, x_T), sched.T)
    sigma = blur_sigma(cfg, sched.T - 1, sched.T) if sched.T >= 2 else cfg.sigma_min
    x0_blurred = blur(x0_hat, sigma, cfg.kernel_size)
    return SampleResult(x0_blurred, spatial_softmax(x0_blurred), None)
