"""Evaluation metrics: physical-unit radial errors, pooled mean/deviation,
strict-threshold success rates, and the serialized report."""
import json

import numpy as np
import pytest

from saltpepper.heatmap import LandmarkSet
from saltpepper.metrics import (
    EvalReport,
    evaluate,
    mre,
    radial_errors,
    report_from_json,
    report_to_json,
    sdr,
)


def lmset(pts, frame=(64, 64), spacing=(1.0, 1.0)):
    return LandmarkSet(np.asarray(pts, dtype=np.float64), frame=frame, spacing_mm=spacing)


def brute_force_report(preds, gts):
    """Everything recomputed with plain loops for cross-checking."""
    errs = []
    for p, g in zip(preds, gts):
        for i in range(p.count):
            dx = (p.points[i, 0] - g.points[i, 0]) * p.spacing_mm[0]
            dy = (p.points[i, 1] - g.points[i, 1]) * p.spacing_mm[1]
            errs.append((dx * dx + dy * dy) ** 0.5)
    mean = sum(errs) / len(errs)
    var = sum((e - mean) ** 2 for e in errs) / len(errs)
    out = {"mre": mean, "std": var**0.5, "sdr": {}}
    for z in (2.0, 2.5, 4.0):
        out["sdr"][z] = 100.0 * sum(1 for e in errs if e < z) / len(errs)
    return out


class TestRadialErrors:
    def test_identical_sets_give_zero(self):
        lm = lmset([[3.0, 4.0], [10.0, 12.0]])
        np.testing.assert_array_equal(radial_errors(lm, lm), [0.0, 0.0])

    def test_three_four_five_triangle(self):
        gt = lmset([[10.0, 10.0]], spacing=(0.1, 0.1))
        pred = lmset([[13.0, 14.0]], spacing=(0.1, 0.1))
        np.testing.assert_allclose(radial_errors(pred, gt), [0.5], atol=1e-12)

    def test_anisotropic_spacing(self):
        sx, sy = 0.1 * 1935 / 640, 0.1 * 2400 / 800
        gt = lmset([[20.0, 20.0]], frame=(640, 800), spacing=(sx, sy))
        pred = lmset([[21.0, 21.0]], frame=(640, 800), spacing=(sx, sy))
        np.testing.assert_allclose(
            radial_errors(pred, gt), [np.sqrt(sx**2 + sy**2)], atol=1e-12
        )

    def test_mismatches_rejected(self):
        a = lmset([[1.0, 1.0]])
        with pytest.raises(ValueError):
            radial_errors(a, lmset([[1.0, 1.0], [2.0, 2.0]]))
        with pytest.raises(ValueError):
            radial_errors(a, lmset([[1.0, 1.0]], frame=(32, 32)))
        with pytest.raises(ValueError):
            radial_errors(a, lmset([[1.0, 1.0]], spacing=(0.5, 1.0)))


class TestMre:
    def test_single_error(self):
        assert mre([2.0]) == (2.0, 0.0)

    def test_pair(self):
        mean, std = mre([0.0, 2.0])
        assert mean == 1.0 and std == 1.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        table = rng.uniform(0, 5, (19, 100)).ravel()
        mean, std = mre(table)
        loop_mean = sum(table) / table.size
        loop_var = sum((e - loop_mean) ** 2 for e in table) / table.size
        assert abs(mean - loop_mean) < 1e-12
        assert abs(std - loop_var**0.5) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mre([])


class TestSdr:
    def test_all_zero_errors(self):
        assert sdr([0.0, 0.0, 0.0], 2.0) == 100.0

    def test_strict_boundary(self):
        assert sdr([1.9, 2.0, 2.1], 2.0) == pytest.approx(100.0 / 3)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(1)
        errs = rng.uniform(0, 5, 500)
        for z in (0.5, 2.0, 2.5, 4.0):
            expected = 100.0 * sum(1 for e in errs if e < z) / errs.size
            assert sdr(errs, z) == expected

    def test_monotone_in_radius(self):
        rng = np.random.default_rng(2)
        errs = rng.uniform(0, 5, 300)
        rates = [sdr(errs, z) for z in (1.0, 2.0, 2.5, 4.0, 10.0)]
        assert all(a <= b for a, b in zip(rates, rates[1:]))

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            sdr([], 2.0)
        with pytest.raises(ValueError):
            sdr([1.0], 0.0)


class TestEvaluate:
    def test_perfect_predictions(self):
        gts = [lmset([[5.0, 5.0], [20.0, 30.0]]) for _ in range(3)]
        report = evaluate(gts, gts)
        assert report.mre_mm == 0.0
        assert report.mre_std_mm == 0.0
        assert all(v == 100.0 for v in report.sdr.values())
        assert report.images == 3
        assert report.landmarks == 2

    def test_single_offset_landmark_hand_computed(self):
        n = 19
        pts = np.column_stack([np.linspace(50, 500, n), np.linspace(50, 500, n)])
        gt = LandmarkSet(pts, frame=(640, 800), spacing_mm=(0.1, 0.1))
        moved = pts.copy()
        moved[16, 0] += 30.0
        pred = LandmarkSet(moved, frame=(640, 800), spacing_mm=(0.1, 0.1))
        report = evaluate([pred], [gt])
        assert report.per_landmark[16].mre_mm == pytest.approx(3.0, abs=1e-12)
        assert report.per_landmark[0].mre_mm == 0.0
        assert report.sdr[2.0] == pytest.approx(100.0 * 18 / 19)
        assert report.mre_mm == pytest.approx(3.0 / 19, abs=1e-12)

    def test_matches_brute_force_on_random_corpora(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n_img, n_lm = int(rng.integers(1, 6)), int(rng.integers(1, 8))
            spacing = (float(rng.uniform(0.05, 0.5)), float(rng.uniform(0.05, 0.5)))
            gts, preds = [], []
            for _ in range(n_img):
                base = rng.uniform(10, 50, (n_lm, 2))
                noise = rng.normal(0, 3, (n_lm, 2))
                gts.append(lmset(base, spacing=spacing))
                preds.append(lmset(np.clip(base + noise, 0, 63), spacing=spacing))
            report = evaluate(preds, gts)
            expected = brute_force_report(preds, gts)
            assert report.mre_mm == pytest.approx(expected["mre"], abs=1e-12)
            assert report.mre_std_mm == pytest.approx(expected["std"], abs=1e-12)
            for z in (2.0, 2.5, 4.0):
                assert report.sdr[z] == expected["sdr"][z]

    def test_translation_invariance(self):
        rng = np.random.default_rng(4)
        base = rng.uniform(10, 40, (5, 2))
        noise = rng.normal(0, 2, (5, 2))
        gt_a = lmset(base)
        pred_a = lmset(base + noise)
        gt_b = lmset(base + 7.0)
        pred_b = lmset(base + noise + 7.0)
        ra = evaluate([pred_a], [gt_a])
        rb = evaluate([pred_b], [gt_b])
        assert ra.mre_mm == pytest.approx(rb.mre_mm, abs=1e-9)

    def test_per_landmark_mean_consistency(self):
        rng = np.random.default_rng(5)
        gts = [lmset(rng.uniform(10, 50, (4, 2))) for _ in range(6)]
        preds = [lmset(np.clip(g.points + rng.normal(0, 2, (4, 2)), 0, 63)) for g in gts]
        report = evaluate(preds, gts)
        mean_of_means = np.mean([pl.mre_mm for pl in report.per_landmark])
        assert mean_of_means == pytest.approx(report.mre_mm, abs=1e-9)

    def test_per_image_first_switch(self):
        gts = [lmset([[10.0, 10.0], [20.0, 20.0]]), lmset([[10.0, 10.0], [20.0, 20.0]])]
        preds = [lmset([[13.0, 14.0], [20.0, 20.0]]), lmset([[10.0, 10.0], [20.0, 20.0]])]
        pooled = evaluate(preds, gts)
        per_image = evaluate(preds, gts, per_image_first=True)
        assert pooled.mre_mm == pytest.approx(5.0 / 4, abs=1e-12)
        assert per_image.mre_mm == pytest.approx((2.5 + 0.0) / 2, abs=1e-12)

    def test_misalignment_rejected(self):
        a = [lmset([[1.0, 1.0]])]
        with pytest.raises(ValueError):
            evaluate(a, [])
        with pytest.raises(ValueError):
            evaluate(a, [lmset([[1.0, 1.0], [2.0, 2.0]])])


class TestReportJson:
    def _report(self):
        rng = np.random.default_rng(6)
        gts = [lmset(rng.uniform(10, 50, (3, 2)), spacing=(0.1, 0.1)) for _ in range(4)]
        preds = [
            lmset(np.clip(g.points + rng.normal(0, 5, (3, 2)), 0, 63), spacing=(0.1, 0.1))
            for g in gts
        ]
        return evaluate(preds, gts)

    def test_fixed_field_names(self):
        doc = json.loads(report_to_json(self._report()))
        for key in ("mre_mm", "mre_std_mm", "sdr_2mm", "sdr_2_5mm", "sdr_4mm", "per_landmark"):
            assert key in doc
        entry = doc["per_landmark"][0]
        assert set(entry) == {"index", "mre_mm", "std_mm"}

    def test_round_trip_lossless(self):
        report = self._report()
        back = report_from_json(report_to_json(report))
        assert back.mre_mm == report.mre_mm
        assert back.mre_std_mm == report.mre_std_mm
        assert back.sdr == report.sdr
        assert back.images == report.images
        assert back.landmarks == report.landmarks
        for a, b in zip(back.per_landmark, report.per_landmark):
            assert (a.index, a.mre_mm, a.std_mm) == (b.index, b.mre_mm, b.std_mm)

    def test_sdr_values_nonincreasing_as_radius_shrinks(self):
        report = self._report()
        assert report.sdr[2.0] <= report.sdr[2.5] <= report.sdr[4.0]
