"""Few-hot heatmap stacks and the operations that move them around.

A landmark set is encoded as an N-channel image with a single hot pixel per
channel. Stacks carry a scale tag naming the value convention currently in
force: `unit` for [0, 1] targets, `diffusion` for the symmetric [-1, 1]
range fed to the noising process, `probability` for per-channel spatial
distributions, and `raw` for anything unconstrained (noisy states, network
outputs). Conversions check the tag so a stack can never silently cross
conventions.

Blurring uses a truncated, normalized Gaussian kernel of fixed odd support.
The 2-D convolution is evaluated as two 1-D passes; with edge-replicate
padding this is *exactly* the dense convolution with the outer-product
kernel, because the index clamping at the border is separable per axis.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ScaleTagError
from .kernels import sepconv_rows

__all__ = [
    "TAG_UNIT",
    "TAG_DIFFUSION",
    "TAG_PROBABILITY",
    "TAG_RAW",
    "HeatmapStack",
    "LandmarkSet",
    "encode_landmarks",
    "extract_landmarks",
    "to_diffusion_scale",
    "to_unit_scale",
    "spatial_softmax",
    "gaussian_kernel",
    "gaussian_filter_channels",
    "blur",
    "dump_heatmap",
    "load_heatmap",
]

TAG_UNIT = "unit"
TAG_DIFFUSION = "diffusion"
TAG_PROBABILITY = "probability"
TAG_RAW = "raw"

_TAG_TO_BYTE = {TAG_UNIT: 0, TAG_DIFFUSION: 1, TAG_PROBABILITY: 2, TAG_RAW: 3}
_BYTE_TO_TAG = {v: k for k, v in _TAG_TO_BYTE.items()}

_MAGIC = b"SPHM"


@dataclass(frozen=True)
class HeatmapStack:
    """N-channel real image plus the scale tag its values live on.

    Treated as immutable: operations return new stacks and never write into
    `values`.
    """

    values: np.ndarray
    scale_tag: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"stack values must be (channels, height, width), got shape {v.shape}")
        if self.scale_tag not in _TAG_TO_BYTE:
            raise ScaleTagError(f"unknown scale tag {self.scale_tag!r}")
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

    def require_tag(self, tag: str) -> None:
        if self.scale_tag != tag:
            raise ScaleTagError(f"expected a {tag}-scaled stack, got {self.scale_tag!r}")


@dataclass(frozen=True)
class LandmarkSet:
    """N pixel-coordinate points with the frame and physical spacing they
    are measured in.

    `points` is (N, 2) ordered (x, y); `frame` is (width, height);
    `spacing_mm` is millimetres per pixel along (x, y).
    """

    points: np.ndarray
    frame: tuple
    spacing_mm: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError(f"points must be a nonempty (N, 2) array, got shape {pts.shape}")
        w, h = self.frame
        if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] >= w) or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] >= h):
            raise ValueError(f"landmark outside the {w}x{h} frame")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "frame", (int(w), int(h)))
        object.__setattr__(self, "spacing_mm", (float(self.spacing_mm[0]), float(self.spacing_mm[1])))

    @property
    def count(self) -> int:
        return self.points.shape[0]


def encode_landmarks(lm: LandmarkSet, h: int, w: int) -> HeatmapStack:
    """One hot pixel per channel at each rounded landmark coordinate."""
    cols = np.rint(lm.points[:, 0]).astype(np.int64)
    rows = np.rint(lm.points[:, 1]).astype(np.int64)
    bad = (cols < 0) | (cols >= w) | (rows < 0) | (rows >= h)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"landmark {idx} at {tuple(lm.points[idx])} rounds outside the {w}x{h} canvas"
        )
    values = np.zeros((lm.count, h, w))
    values[np.arange(lm.count), rows, cols] = 1.0
    return HeatmapStack(values, TAG_UNIT)


def extract_landmarks(s: HeatmapStack, spacing_mm=(1.0, 1.0)) -> LandmarkSet:
    """Per-channel argmax coordinates; ties broken at the lowest row-major
    index so extraction is deterministic."""
    if s.channels < 1:
        raise ValueError("cannot extract landmarks from an empty stack")
    flat = s.values.reshape(s.channels, -1)
    idx = np.argmax(flat, axis=1)  # first maximum in row-major order
    rows, cols = np.unravel_index(idx, (s.height, s.width))
    pts = np.column_stack([cols.astype(np.float64), rows.astype(np.float64)])
    return LandmarkSet(points=pts, frame=(s.width, s.height), spacing_mm=spacing_mm)


def to_diffusion_scale(s: HeatmapStack) -> HeatmapStack:
    """Affine map of a unit-scaled stack onto the symmetric [-1, 1] range."""
    s.require_tag(TAG_UNIT)
    return HeatmapStack(2.0 * s.values - 1.0, TAG_DIFFUSION)


def to_unit_scale(s: HeatmapStack) -> HeatmapStack:
    """Inverse of `to_diffusion_scale`."""
    s.require_tag(TAG_DIFFUSION)
    return HeatmapStack((s.values + 1.0) / 2.0, TAG_UNIT)


def spatial_softmax(s: HeatmapStack) -> HeatmapStack:
    """Per-channel softmax over all pixel positions.

    Values are treated as unnormalized log-scores. Stabilized by subtracting
    the per-channel maximum before exponentiation.
    """
    if not np.all(np.isfinite(s.values)):
        raise ValueError("spatial softmax requires finite values")
    shifted = s.values - s.values.max(axis=(1, 2), keepdims=True)
    e = np.exp(shifted)
    return HeatmapStack(e / e.sum(axis=(1, 2), keepdims=True), TAG_PROBABILITY)


def _gaussian_taps(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian samples at integer offsets; delta at sigma=0."""
    if size <= 0 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0.0:
        taps = np.zeros(size)
        taps[size // 2] = 1.0
        return taps
    d = np.arange(size, dtype=np.float64) - size // 2
    taps = np.exp(-(d**2) / (2.0 * sigma * sigma))
    return taps / taps.sum()


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """size x size isotropic Gaussian kernel, normalized to sum to 1."""
    taps = _gaussian_taps(size, sigma)
    return np.outer(taps, taps)


def gaussian_filter_channels(values: np.ndarray, sigma: float, kernel_size: int) -> np.ndarray:
    """Separable Gaussian filtering of a (channels, h, w) array with
    edge-replicate padding. Equals dense convolution with
    `gaussian_kernel(kernel_size, sigma)` because border clamping separates
    per axis."""
    taps = _gaussian_taps(kernel_size, sigma)
    if sigma == 0.0:
        return values.copy()
    p = kernel_size // 2
    padded = np.pad(values, ((0, 0), (0, 0), (p, p)), mode="edge")
    rows_done = sepconv_rows(np.ascontiguousarray(padded), taps)
    flipped = np.ascontiguousarray(np.swapaxes(rows_done, 1, 2))
    padded = np.pad(flipped, ((0, 0), (0, 0), (p, p)), mode="edge")
    cols_done = sepconv_rows(np.ascontiguousarray(padded), taps)
    return np.ascontiguousarray(np.swapaxes(cols_done, 1, 2))


def blur(s: HeatmapStack, sigma: float, kernel_size: int = 13) -> HeatmapStack:
    """Per-channel Gaussian blur; preserves the scale tag.

    Channel mass is preserved exactly for inputs supported at least
    kernel_size//2 pixels away from every border; near the border the
    replicate padding keeps attenuation small instead of darkening edges.
    """
    return HeatmapStack(gaussian_filter_channels(s.values, sigma, kernel_size), s.scale_tag)


def dump_heatmap(s: HeatmapStack, path) -> None:
    """Binary dump: magic "SPHM", then channels/height/width as little-endian
    u32, then float32 values row-major, then one scale-tag byte."""
    header = _MAGIC + struct.pack("<III", s.channels, s.height, s.width)
    payload = s.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(bytes([_TAG_TO_BYTE[s.scale_tag]]))


def load_heatmap(path) -> HeatmapStack:
    """Read a dump produced by `dump_heatmap`; values come back as the
    float32-quantized originals."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 17 or raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a heatmap dump (bad magic or header)")
    n, h, w = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * n * h * w + 1
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header ({expected} expected)")
    tag_byte = raw[-1]
    if tag_byte not in _BYTE_TO_TAG:
        raise ValueError(f"{path}: unknown scale-tag byte {tag_byte}")
    values = np.frombuffer(raw[16:-1], dtype="<f4").astype(np.float64).reshape(n, h, w)
    return HeatmapStack(values, _BYTE_TO_TAG[tag_byte])
