"""Dataset ingestion and the synthetic desk-scale corpus.

File formats are deliberately plain: binary P5 greymaps for images, one
"x,y" decimal pair per line for landmark annotations, and a three-section
text manifest naming the train/validation/test split. Synthetic corpora are
written through the same writers, so downstream code never knows which kind
of data it is reading.

Pixel values map linearly between the greymap's [0, maxval] and the model's
[-1, 1]. Annotation coordinates are 0-indexed and x-first by default; a flag
accommodates 1-indexed sources.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .forward import ReferenceImage
from .heatmap import LandmarkSet, gaussian_filter_channels

STRUCTURE_KINDS = ("disc", "ring", "plus", "cross")

_STRUCTURE_RADIUS = 5
_PLACE_TRIES = 100


@dataclass(frozen=True)
class DatasetRecord:
    """One image with its annotations and the averaged ground truth."""

    id: str
    image: ReferenceImage
    annotations: Tuple[LandmarkSet, ...]
    ground_truth: LandmarkSet

    def __post_init__(self):
        counts = {a.count for a in self.annotations} | {self.ground_truth.count}
        if len(counts) != 1:
            raise ValueError(f"record {self.id!r}: annotation landmark counts differ: {counts}")


def make_record(record_id: str, image: ReferenceImage, annotations: Sequence[LandmarkSet]) -> DatasetRecord:
    """Build a record; ground truth is the mean of the annotator points."""
    if not 1 <= len(annotations) <= 2:
        raise ValueError(f"record {record_id!r}: need one or two annotation sets")
    counts = {a.count for a in annotations}
    if len(counts) != 1:
        raise ValueError(f"record {record_id!r}: annotation landmark counts differ: {counts}")
    first = annotations[0]
    mean_pts = np.mean([a.points for a in annotations], axis=0)
    gt = LandmarkSet(points=mean_pts, frame=first.frame, spacing_mm=first.spacing_mm)
    return DatasetRecord(
        id=record_id, image=image, annotations=tuple(annotations), ground_truth=gt
    )


@dataclass(frozen=True)
class SplitManifest:
    """Record ids for each of the three splits; ids never repeat."""

    train: List[str]
    validation: List[str]
    test: List[str]

    def __post_init__(self):
        everything = self.train + self.validation + self.test
        if len(set(everything)) != len(everything):
            raise ValueError("manifest contains a duplicated record id")

    @property
    def all_ids(self) -> List[str]:
        return self.train + self.validation + self.test


# ---------------------------------------------------------------- file IO


def write_pgm(path, values: np.ndarray) -> None:
    """Quantize a (h, w) array from [-1, 1] onto an 8-bit binary greymap."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a (h, w) plane, got shape {values.shape}")
    h, w = values.shape
    raw = np.rint((np.clip(values, -1.0, 1.0) + 1.0) / 2.0 * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def _read_pgm_header(data: bytes, path) -> Tuple[int, int, int, int]:
    """Parse the P5 header, returning (w, h, maxval, payload offset)."""
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary greymap (P5) file")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated greymap header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            m = re.match(rb"\d+", data[pos:])
            if m is None:
                raise ValueError(f"{path}: malformed greymap header")
            fields.append(int(m.group(0)))
            pos += m.end()
    w, h, maxval = fields
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return w, h, maxval, pos + 1  # single whitespace byte before the payload


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit binary greymap onto [-1, 1].

    Two-byte samples are big-endian, as the format prescribes.
    """
    data = Path(path).read_bytes()
    w, h, maxval, offset = _read_pgm_header(data, path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = h * w * dtype.itemsize
    payload = data[offset : offset + expected]
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    raw = np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.float64)
    return 2.0 * raw / maxval - 1.0


def write_landmark_csv(path, lm: LandmarkSet) -> None:
    """One "x,y" pair per line; repr floats so parsing returns exact values."""
    with open(path, "w") as f:
        for x, y in lm.points:
            f.write(f"{float(x)!r},{float(y)!r}\n")


def read_landmark_csv(path, n: int, frame, spacing_mm, one_indexed: bool = False) -> LandmarkSet:
    """Parse the first n landmark lines of an annotation file."""
    lines = Path(path).read_text().splitlines()
    pts = []
    for lineno, line in enumerate(lines[:n], start=1):
        parts = line.strip().split(",")
        try:
            if len(parts) != 2:
                raise ValueError
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: expected 'x,y', got {line!r}") from None
    if len(pts) < n:
        raise ValueError(f"{path}: expected {n} landmark lines, found {len(pts)}")
    points = np.array(pts, dtype=np.float64)
    if one_indexed:
        points = points - 1.0
    return LandmarkSet(points=points, frame=frame, spacing_mm=spacing_mm)


_SECTION_FOR = {"[train]": "train", "[validation]": "validation", "[test]": "test"}


def write_manifest(path, manifest: SplitManifest) -> None:
    with open(path, "w") as f:
        for section in ("train", "validation", "test"):
            f.write(f"[{section}]\n")
            for record_id in getattr(manifest, section):
                f.write(record_id + "\n")


def read_manifest(path) -> SplitManifest:
    sections = {"train": [], "validation": [], "test": []}
    current = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            if line not in _SECTION_FOR:
                raise ValueError(f"{path}: line {lineno}: unknown section {line!r}")
            current = _SECTION_FOR[line]
        elif current is None:
            raise ValueError(f"{path}: line {lineno}: record id before any section header")
        else:
            sections[current].append(line)
    return SplitManifest(**sections)


def load_corpus(
    image_dir,
    annotation_dirs: Sequence,
    manifest: SplitManifest,
    n_landmarks: int,
    spacing_mm=(0.1, 0.1),
    one_indexed: bool = False,
) -> List[DatasetRecord]:
    """Load every manifest id from per-record greymap and annotation files.

    Each annotation directory contributes one landmark set per record, in
    the order given; ground truth averages them.
    """
    image_dir = Path(image_dir)
    records = []
    for record_id in manifest.all_ids:
        img_path = image_dir / f"{record_id}.pgm"
        if not img_path.exists():
            raise FileNotFoundError(f"missing image file {img_path}")
        plane = read_pgm(img_path)
        image = ReferenceImage(plane[None, :, :])
        h, w = plane.shape
        annotations = []
        for ann_dir in annotation_dirs:
            ann_path = Path(ann_dir) / f"{record_id}.csv"
            if not ann_path.exists():
                raise FileNotFoundError(f"missing annotation file {ann_path}")
            annotations.append(
                read_landmark_csv(ann_path, n_landmarks, (w, h), spacing_mm, one_indexed)
            )
        records.append(make_record(record_id, image, annotations))
    return records


def save_corpus(records: Sequence[DatasetRecord], root, manifest: SplitManifest) -> None:
    """Write a corpus directory: images/, annotations/truth/, manifest.txt.

    Only the ground-truth annotations are persisted; synthetic corpora have
    no second annotator to preserve.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations" / "truth").mkdir(parents=True, exist_ok=True)
    for r in records:
        write_pgm(root / "images" / f"{r.id}.pgm", r.image.values[0])
        write_landmark_csv(root / "annotations" / "truth" / f"{r.id}.csv", r.ground_truth)
    write_manifest(root / "manifest.txt", manifest)


# ------------------------------------------------------------ downsampling


def _area_weights(orig: int, target: int) -> np.ndarray:
    """Rows sum to 1; entry (i, j) is the fraction of output cell i covered
    by input cell j under exact box overlap."""
    scale = orig / target
    w = np.zeros((target, orig))
    for i in range(target):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), orig)):
            w[i, j] = (min(j + 1.0, hi) - max(j, lo)) / scale
    return w


def downsample_record(r: DatasetRecord, target_w: int, target_h: int) -> DatasetRecord:
    """Area-average the image; rescale coordinates and spacing so every
    landmark keeps its physical position."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError(f"degenerate target size ({target_w}, {target_h})")
    c, h, w = r.image.values.shape
    if (target_w, target_h) == (w, h):
        return r
    wy = _area_weights(h, target_h)
    wx = _area_weights(w, target_w)
    planes = np.stack([wy @ r.image.values[i] @ wx.T for i in range(c)])
    image = ReferenceImage(np.clip(planes, -1.0, 1.0))

    sx, sy = target_w / w, target_h / h
    def rescale(lm: LandmarkSet) -> LandmarkSet:
        return LandmarkSet(
            points=lm.points * [sx, sy],
            frame=(target_w, target_h),
            spacing_mm=(lm.spacing_mm[0] / sx, lm.spacing_mm[1] / sy),
        )

    return DatasetRecord(
        id=r.id,
        image=image,
        annotations=tuple(rescale(a) for a in r.annotations),
        ground_truth=rescale(r.ground_truth),
    )


# -------------------------------------------------------- synthetic corpus


def structure_kind(index: int) -> str:
    """Landmark index to stamp shape; shapes repeat every four landmarks."""
    return STRUCTURE_KINDS[index % len(STRUCTURE_KINDS)]


def render_structure(kind: str, radius: int) -> np.ndarray:
    """A (2r+1, 2r+1) stamp in [0, 1] whose center pixel marks the landmark."""
    d = 2 * radius + 1
    yy, xx = np.mgrid[0:d, 0:d].astype(np.float64) - radius
    rr = np.sqrt(xx**2 + yy**2)
    if kind == "disc":
        return (rr <= radius - 1.0).astype(np.float64)
    if kind == "ring":
        return ((rr <= radius) & (rr >= radius - 1.5)).astype(np.float64)
    if kind == "plus":
        return ((np.abs(xx) <= 1.0) | (np.abs(yy) <= 1.0)).astype(np.float64)
    if kind == "cross":
        return (np.abs(np.abs(xx) - np.abs(yy)) <= 1.0).astype(np.float64)
    raise ValueError(f"unknown structure kind {kind!r}")


def _default_margin(h: int, w: int, radius: int) -> int:
    return max(radius + 2, min(16, min(h, w) // 4))


def _place_centers(
    n: int, h: int, w: int, margin: int, min_dist: float, rng: np.random.Generator
) -> np.ndarray:
    """Integer centers, pairwise at least min_dist apart; placement restarts
    from scratch when a structure runs out of tries."""
    for _ in range(_PLACE_TRIES):
        centers = []
        ok = True
        for _ in range(n):
            for _ in range(_PLACE_TRIES):
                cx = int(rng.integers(margin, w - margin))
                cy = int(rng.integers(margin, h - margin))
                if all((cx - x) ** 2 + (cy - y) ** 2 >= min_dist**2 for x, y in centers):
                    centers.append((cx, cy))
                    break
            else:
                ok = False
                break
        if ok:
            return np.array(centers, dtype=np.float64)
    raise RuntimeError(
        f"could not place {n} structures {min_dist:.0f}px apart on a {w}x{h} canvas"
    )


def synth_corpus(count: int, h: int, w: int, n_landmarks: int, seed: int) -> List[DatasetRecord]:
    """Generate a deterministic corpus of smooth backgrounds with one
    distinct structure per landmark, centered exactly on the ground truth."""
    if h < 32 or w < 32:
        raise ValueError(f"canvas must be at least 32x32, got {h}x{w}")
    if n_landmarks < 1:
        raise ValueError("need at least one landmark")
    radius = _STRUCTURE_RADIUS
    margin = _default_margin(h, w, radius)
    diameter = 2 * radius + 1
    records = []
    for idx in range(count):
        rng = np.random.default_rng([seed, 0, idx])
        background = rng.normal(0.0, 1.0, (1, h, w))
        background = gaussian_filter_channels(background, 3.0, 19)
        background = 0.35 * background / max(np.abs(background).max(), 1e-12) - 0.1

        centers = _place_centers(n_landmarks, h, w, margin, diameter, rng)
        canvas = background[0].copy()
        for k, (cx, cy) in enumerate(centers.astype(int)):
            amp = rng.uniform(0.55, 0.9)
            stamp = render_structure(structure_kind(k), radius)
            canvas[cy - radius : cy + radius + 1, cx - radius : cx + radius + 1] += amp * stamp
        image = ReferenceImage(np.clip(canvas, -1.0, 1.0)[None])
        lm = LandmarkSet(points=centers, frame=(w, h), spacing_mm=(1.0, 1.0))
        records.append(make_record(f"synth{idx:04d}", image, [lm]))
    return records
