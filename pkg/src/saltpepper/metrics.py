"""Landmark accuracy metrics.

Errors are physical distances: pixel deltas scaled by each axis's mm/px
spacing before the norm. The headline numbers are the pooled mean radial
error (with population standard deviation) and success rates at fixed mm
radii, counted with a strict inequality.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .heatmap import LandmarkSet

SDR_RADII_MM = (2.0, 2.5, 4.0)


@dataclass(frozen=True)
class LandmarkStat:
    index: int
    mre_mm: float
    std_mm: float


@dataclass(frozen=True)
class EvalReport:
    """Corpus-level accuracy summary with a per-landmark breakdown."""

    mre_mm: float
    mre_std_mm: float
    sdr: Dict[float, float]
    per_landmark: List[LandmarkStat]
    images: int
    landmarks: int


def radial_errors(pred: LandmarkSet, gt: LandmarkSet) -> np.ndarray:
    """Per-landmark distances in mm between two sets over the same frame."""
    if pred.count != gt.count:
        raise ValueError(f"landmark count mismatch: {pred.count} vs {gt.count}")
    if pred.frame != gt.frame:
        raise ValueError(f"frame mismatch: {pred.frame} vs {gt.frame}")
    if pred.spacing_mm != gt.spacing_mm:
        raise ValueError(f"spacing mismatch: {pred.spacing_mm} vs {gt.spacing_mm}")
    delta_mm = (pred.points - gt.points) * np.asarray(pred.spacing_mm)
    return np.sqrt((delta_mm**2).sum(axis=1))


def mre(errors, std_ddof: int = 0) -> Tuple[float, float]:
    """Mean and standard deviation of a flat error collection.

    Population deviation by default; pass std_ddof=1 for the sample form.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("cannot average an empty error collection")
    return float(errors.mean()), float(errors.std(ddof=std_ddof))


def sdr(errors, z_mm: float) -> float:
    """Percentage of errors strictly below the radius."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("cannot rate an empty error collection")
    if z_mm <= 0:
        raise ValueError(f"radius must be positive, got {z_mm}")
    return float(100.0 * np.count_nonzero(errors < z_mm) / errors.size)


def evaluate(
    preds: Sequence[LandmarkSet],
    gts: Sequence[LandmarkSet],
    per_image_first: bool = False,
) -> EvalReport:
    """Score aligned prediction/ground-truth lists.

    Pooled statistics treat every landmark instance equally; the
    per_image_first switch averages within each image before pooling, for
    comparison against reports that read that way.
    """
    if len(preds) != len(gts) or len(preds) == 0:
        raise ValueError(f"need equal nonempty lists, got {len(preds)} vs {len(gts)}")
    table = np.stack([radial_errors(p, g) for p, g in zip(preds, gts)])  # (images, N)
    pooled = table.ravel()
    if per_image_first:
        mean, std = mre(table.mean(axis=1))
    else:
        mean, std = mre(pooled)
    per_landmark = [
        LandmarkStat(index=i, mre_mm=float(col.mean()), std_mm=float(col.std()))
        for i, col in enumerate(table.T)
    ]
    return EvalReport(
        mre_mm=mean,
        mre_std_mm=std,
        sdr={z: sdr(pooled, z) for z in SDR_RADII_MM},
        per_landmark=per_landmark,
        images=table.shape[0],
        landmarks=table.shape[1],
    )


def _sdr_key(z: float) -> str:
    text = f"{z:g}".replace(".", "_")
    return f"sdr_{text}mm"


def report_to_json(report: EvalReport) -> str:
    doc = {
        "mre_mm": report.mre_mm,
        "mre_std_mm": report.mre_std_mm,
        "images": report.images,
        "landmarks": report.landmarks,
        "per_landmark": [
            {"index": pl.index, "mre_mm": pl.mre_mm, "std_mm": pl.std_mm}
            for pl in report.per_landmark
        ],
    }
    for z, value in report.sdr.items():
        doc[_sdr_key(z)] = value
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> EvalReport:
    doc = json.loads(text)
    sdr_map = {}
    for z in SDR_RADII_MM:
        key = _sdr_key(z)
        if key in doc:
            sdr_map[z] = doc[key]
    return EvalReport(
        mre_mm=doc["mre_mm"],
        mre_std_mm=doc["mre_std_mm"],
        sdr=sdr_map,
        per_landmark=[
            LandmarkStat(index=e["index"], mre_mm=e["mre_mm"], std_mm=e["std_mm"])
            for e in doc["per_landmark"]
        ],
        images=doc["images"],
        landmarks=doc["landmarks"],
    )
