"""Training objectives.

Three terms: a squared-error term on predicted noise, the same term on
predicted clean stacks, and a per-channel spatial cross-entropy that treats
the prediction as pixel logits. The combined objective weights the clean-stack
and cross-entropy terms; each weight is applied exactly once, here.

All functions operate on a single record. Averaging across a batch is the
trainer's job.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .forward import NoiseDraw
from .heatmap import TAG_DIFFUSION, TAG_RAW, TAG_UNIT, HeatmapStack, spatial_softmax, to_unit_scale

Predicted = Union[HeatmapStack, np.ndarray]


@dataclass(frozen=True)
class LossWeights:
    """Term weights and the additive floor that keeps the log finite."""

    lambda_s: float = 0.01
    lambda_nll: float = 1.0
    epsilon_floor: float = 1e-9

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_nll < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_s == 0 and self.lambda_nll == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.epsilon_floor <= 0:
            raise ValueError("epsilon_floor must be positive")


def _values(pred: Predicted) -> np.ndarray:
    if isinstance(pred, HeatmapStack):
        return pred.values
    return np.asarray(pred, dtype=np.float64)


def _squared_error(target: np.ndarray, pred: np.ndarray, reduction: str) -> float:
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: target {target.shape} vs prediction {pred.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = float(np.sum((target - pred) ** 2))
    return total / target.size if reduction == "mean" else total


def _squared_error_grad(target: np.ndarray, pred: np.ndarray, reduction: str) -> np.ndarray:
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: target {target.shape} vs prediction {pred.shape}")
    g = 2.0 * (pred - target)
    return g / target.size if reduction == "mean" else g


def loss_simple(eps_true: NoiseDraw, eps_pred: Predicted, reduction: str = "mean") -> float:
    """Squared difference between drawn and predicted noise."""
    return _squared_error(eps_true.values, _values(eps_pred), reduction)


def loss_simple_grad(eps_true: NoiseDraw, eps_pred: Predicted, reduction: str = "mean") -> np.ndarray:
    return _squared_error_grad(eps_true.values, _values(eps_pred), reduction)


def loss_s(x0: HeatmapStack, x0_pred: Predicted, reduction: str = "mean") -> float:
    """Squared difference between the clean stack and its prediction.

    The target must be on the symmetric diffusion scale, same range the
    denoiser's Tanh head produces.
    """
    x0.require_tag(TAG_DIFFUSION)
    return _squared_error(x0.values, _values(x0_pred), reduction)


def loss_s_grad(x0: HeatmapStack, x0_pred: Predicted, reduction: str = "mean") -> np.ndarray:
    x0.require_tag(TAG_DIFFUSION)
    return _squared_error_grad(x0.values, _values(x0_pred), reduction)


def loss_nll(x0_unit: HeatmapStack, logits: Predicted, floor: float = 1e-9) -> float:
    """Per-channel cross-entropy between a unit-scale target and the spatial
    softmax of the prediction, summed over channels.

    The floor is added inside the log so an exact zero probability at a
    target pixel stays finite.
    """
    x0_unit.require_tag(TAG_UNIT)
    z = _values(logits)
    if x0_unit.values.shape != z.shape:
        raise ValueError(f"shape mismatch: target {x0_unit.values.shape} vs logits {z.shape}")
    probs = spatial_softmax(HeatmapStack(z, TAG_RAW))
    return float(-np.sum(x0_unit.values * np.log(probs.values + floor)))


def loss_nll_grad(x0_unit: HeatmapStack, logits: Predicted, floor: float = 1e-9) -> np.ndarray:
    """Gradient of `loss_nll` with respect to the logits.

    With per-channel softmax s and target mass t the per-pixel gradient is
    s * sum(t*s/(s+floor)) - t*s/(s+floor), which collapses to the familiar
    s - t as the floor vanishes.
    """
    x0_unit.require_tag(TAG_UNIT)
    z = _values(logits)
    if x0_unit.values.shape != z.shape:
        raise ValueError(f"shape mismatch: target {x0_unit.values.shape} vs logits {z.shape}")
    s = spatial_softmax(HeatmapStack(z, TAG_RAW)).values
    t = x0_unit.values
    weighted = t * s / (s + floor)
    return s * weighted.sum(axis=(1, 2), keepdims=True) - weighted


def loss_combined(x0: HeatmapStack, x0_pred: Predicted, w: LossWeights, reduction: str = "mean"):
    """Weighted sum of the clean-stack and cross-entropy terms.

    Returns the total together with the unweighted per-term values for
    logging. The prediction serves double duty: compared to the clean stack
    directly, and read as pixel logits for the cross-entropy.
    """
    term_s = loss_s(x0, x0_pred, reduction) if w.lambda_s > 0 else 0.0
    term_nll = loss_nll(to_unit_scale(x0), x0_pred, w.epsilon_floor) if w.lambda_nll > 0 else 0.0
    total = w.lambda_s * term_s + w.lambda_nll * term_nll
    return total, {"loss_s": term_s, "loss_nll": term_nll}


def loss_combined_grad(x0: HeatmapStack, x0_pred: Predicted, w: LossWeights, reduction: str = "mean") -> np.ndarray:
    """Gradient of the combined objective with respect to the prediction."""
    g = np.zeros_like(_values(x0_pred))
    if w.lambda_s > 0:
        g += w.lambda_s * loss_s_grad(x0, x0_pred, reduction)
    if w.lambda_nll > 0:
        g += w.lambda_nll * loss_nll_grad(to_unit_scale(x0), x0_pred, w.epsilon_floor)
    return g
