"""Training-time augmentation.

Geometric edits (affine warp, smooth elastic displacement) move the image and
its landmark coordinates through the same map; photometric edits (value
multiplication, gamma, cutout) touch pixel values only. A draw that pushes
any landmark out of frame is rejected and redrawn a bounded number of times.

Affine matrices act on coordinates centered at ((w-1)/2, (h-1)/2), so a 2x3
matrix fully describes a transform about the image center without knowing the
frame. Displacement fields are (2, h, w) arrays, x-component first; content
at q moves to q + D(q), images are resampled at p - D(p), and landmarks map
forward through a bilinear field lookup. The field is smooth enough that this
forward lookup stays within sub-pixel agreement of the exact inverse.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import AugmentRejectionError
from .heatmap import LandmarkSet, gaussian_filter_channels

_MAX_REDRAWS = 10


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for every augmentation parameter.

    Symmetric ranges are half-widths about the neutral value (rotation and
    shear about 0 degrees, translation about 0 px, value multiplication about
    a factor of 1). Interval parameters are (lo, hi) pairs.
    """

    rotation_deg: float = 3.0
    translate_px: float = 10.0
    scale: Tuple[float, float] = (0.95, 1.05)
    shear_deg: float = 10.0
    value_mult: float = 0.5
    elastic_alpha: float = 500.0
    elastic_sigma: float = 30.0
    cutout_max_frac: float = 0.3
    gamma: Tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        problems = []
        for name in ("rotation_deg", "translate_px", "shear_deg", "value_mult", "elastic_alpha"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        for name in ("scale", "gamma"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                problems.append(f"{name} range ({lo}, {hi}) has lo > hi")
        if self.scale[0] <= 0:
            problems.append("scale must stay positive")
        if self.gamma[0] <= 0:
            problems.append("gamma must stay positive")
        if not 0.0 <= self.cutout_max_frac <= 1.0:
            problems.append(f"cutout_max_frac must lie in [0, 1], got {self.cutout_max_frac}")
        if self.elastic_sigma <= 0:
            problems.append("elastic_sigma must be positive")
        if problems:
            raise ValueError("; ".join(problems))


def random_affine(cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw a 2x3 affine matrix in centered coordinates.

    Linear part is scale * rotation * shear; parameters are drawn in a fixed
    order (rotation, translate x, translate y, scale, shear) so streams stay
    aligned across configurations.
    """
    theta = np.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    tx = rng.uniform(-cfg.translate_px, cfg.translate_px)
    ty = rng.uniform(-cfg.translate_px, cfg.translate_px)
    s = rng.uniform(cfg.scale[0], cfg.scale[1])
    phi = np.radians(rng.uniform(-cfg.shear_deg, cfg.shear_deg))
    if theta == 0.0 and phi == 0.0 and s == 1.0:
        linear = np.eye(2)
    else:
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        shear = np.array([[1.0, np.tan(phi)], [0.0, 1.0]])
        linear = s * rot @ shear
    return np.hstack([linear, np.array([[tx], [ty]])])


def _center(h: int, w: int) -> Tuple[float, float]:
    return (w - 1) / 2.0, (h - 1) / 2.0


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (c, h, w) planes at continuous coordinates, clamped to the
    frame so out-of-range positions take the edge value."""
    c, h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _is_affine(transform: np.ndarray) -> bool:
    if transform.ndim == 2 and transform.shape == (2, 3):
        return True
    if transform.ndim == 3 and transform.shape[0] == 2:
        return False
    raise ValueError(f"transform must be a 2x3 matrix or a (2, h, w) field, got {transform.shape}")


def warp_image(img: np.ndarray, transform: np.ndarray) -> np.ndarray:
    """Resample an image through an affine map or a displacement field.

    Inverse-mapped bilinear interpolation; the identity transform reproduces
    the input bit for bit.
    """
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    if _is_affine(transform):
        linear = transform[:, :2]
        t = transform[:, 2]
        if np.array_equal(linear, np.eye(2)) and np.all(t == 0.0):
            return img.copy()
        cx, cy = _center(h, w)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        pc = np.stack([xs.ravel() - cx, ys.ravel() - cy])
        src = np.linalg.inv(linear) @ (pc - t[:, None])
        return _bilinear_sample(img, (src[0] + cx).reshape(h, w), (src[1] + cy).reshape(h, w))
    if transform.shape[1:] != (h, w):
        raise ValueError(f"field shape {transform.shape} does not match image {img.shape}")
    if not np.any(transform):
        return img.copy()
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return _bilinear_sample(img, xs - transform[0], ys - transform[1])


def warp_landmarks(lm: LandmarkSet, transform: np.ndarray) -> LandmarkSet:
    """Map landmark coordinates through the same transform as the image.

    Raises ValueError when a mapped point leaves the frame; callers redraw.
    """
    w, h = lm.frame
    if _is_affine(transform):
        cx, cy = _center(h, w)
        centered = lm.points - [cx, cy]
        moved = centered @ transform[:, :2].T + transform[:, 2] + [cx, cy]
    else:
        if transform.shape[1:] != (h, w):
            raise ValueError(f"field shape {transform.shape} does not match frame {lm.frame}")
        dx = _bilinear_sample(transform[0][None], lm.points[:, 0], lm.points[:, 1])[0]
        dy = _bilinear_sample(transform[1][None], lm.points[:, 0], lm.points[:, 1])[0]
        moved = lm.points + np.column_stack([dx, dy])
    return LandmarkSet(points=moved, frame=lm.frame, spacing_mm=lm.spacing_mm)


def elastic_field(h: int, w: int, alpha: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth random displacement field: uniform noise in (-1, 1), Gaussian
    smoothed at `sigma`, scaled by `alpha`. Returns (2, h, w), x first."""
    if sigma <= 0:
        raise ValueError(f"elastic sigma must be positive, got {sigma}")
    if alpha < 0:
        raise ValueError(f"elastic alpha must be non-negative, got {alpha}")
    noise = rng.uniform(-1.0, 1.0, (2, h, w))
    if alpha == 0.0:
        return np.zeros((2, h, w))
    # smooth under zero extension: replicate padding would hand border pixels
    # a large share of a single noise draw and the field would spike there,
    # so pad the noise with zeros first and crop the valid center back out
    half = int(np.ceil(3.0 * sigma))
    kernel_size = 2 * half + 1
    padded = np.pad(noise, ((0, 0), (half, half), (half, half)))
    smoothed = gaussian_filter_channels(padded, sigma, kernel_size)
    return alpha * smoothed[:, half : half + h, half : half + w]


def photometric(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Value multiplication, gamma on the [0, 1] rescaled image, one
    rectangular cutout filled with the image mean, then a clamp to [-1, 1].

    Every random draw happens unconditionally so the stream consumed is the
    same for any configuration; neutral draws skip their arithmetic to keep
    the identity exact.
    """
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    factor = rng.uniform(1.0 - cfg.value_mult, 1.0 + cfg.value_mult)
    gamma = rng.uniform(cfg.gamma[0], cfg.gamma[1])
    frac = rng.uniform(0.0, cfg.cutout_max_frac)
    aspect = rng.uniform(0.5, 2.0)
    u = rng.uniform()
    v = rng.uniform()

    out = img if factor == 1.0 else img * factor
    if gamma != 1.0:
        out = 2.0 * np.clip((out + 1.0) / 2.0, 0.0, 1.0) ** gamma - 1.0
    cw = int(np.floor(np.sqrt(frac * h * w * aspect)))
    ch = int(np.floor(np.sqrt(frac * h * w / aspect)))
    cw, ch = min(cw, w), min(ch, h)
    if cw >= 1 and ch >= 1:
        x0 = int(np.floor(u * (w - cw + 1)))
        y0 = int(np.floor(v * (h - ch + 1)))
        out = out.copy()
        out[:, y0 : y0 + ch, x0 : x0 + cw] = out.mean()
    return np.clip(out, -1.0, 1.0)


def augment_record(
    img: np.ndarray, lm: LandmarkSet, cfg: AugmentConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, LandmarkSet]:
    """Apply one random geometric + photometric draw to an image/landmark
    pair.

    Geometry is affine first, then elastic, as two sequential resamples; the
    landmarks follow the composite map. Draws whose landmarks leave the frame
    are redrawn, up to a bound, after which the record is rejected.
    """
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    if lm.frame != (w, h):
        raise ValueError(f"landmark frame {lm.frame} does not match image ({w}, {h})")

    geometry = None
    for _ in range(_MAX_REDRAWS):
        affine = random_affine(cfg, rng)
        field = elastic_field(h, w, cfg.elastic_alpha, cfg.elastic_sigma, rng)
        try:
            moved = warp_landmarks(warp_landmarks(lm, affine), field)
        except ValueError:
            continue
        geometry = (affine, field, moved)
        break
    if geometry is None:
        raise AugmentRejectionError(
            f"no in-frame geometric draw after {_MAX_REDRAWS} attempts"
        )

    affine, field, moved = geometry
    warped = warp_image(warp_image(img, affine), field)
    return photometric(warped, cfg, rng), moved
