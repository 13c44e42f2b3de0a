import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinewarp.analysis import (
    AnalysisError,
    CementBound,
    PipelineReport,
    StraighteningRow,
    VolumeRow,
    build_report,
    cement_upper_bound,
    dice,
    distance_error,
    fracture_distance,
    iou,
    mre,
    psnr,
    ssim,
    vertebra_code,
    vertebra_name,
    volume_error,
)
from spinewarp.volume import ScalarVolume, VolumeGeometry


class TestNames:
    def test_known_names(self):
        assert vertebra_name(1) == "C1"
        assert vertebra_name(8) == "T1"
        assert vertebra_name(21) == "L2"
        assert vertebra_name(24) == "L5"

    def test_roundtrip_all_codes(self):
        for code in range(1, 25):
            assert vertebra_code(vertebra_name(code)) == code

    def test_parse_variants(self):
        assert vertebra_code("l2") == 21
        assert vertebra_code(" T12 ") == 19
        assert vertebra_code("21") == 21
        assert vertebra_code(21) == 21

    def test_invalid(self):
        with pytest.raises(AnalysisError):
            vertebra_name(0)
        with pytest.raises(AnalysisError):
            vertebra_name(25)
        with pytest.raises(AnalysisError):
            vertebra_code("S1")
        with pytest.raises(AnalysisError):
            vertebra_code("0")


class TestOverlap:
    def test_identical_masks(self, rng):
        a = rng.random((10, 10, 10)) < 0.3
        assert dice(a, a) == 1.0
        assert iou(a, a) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0], b[2] = True, True
        assert dice(a, b) == 0.0
        assert iou(a, b) == 0.0

    def test_both_empty_is_perfect(self):
        z = np.zeros((3, 3, 3), bool)
        assert dice(z, z) == 1.0
        assert iou(z, z) == 1.0

    def test_half_overlap_value(self):
        a = np.zeros((4, 1, 1), bool)
        b = np.zeros((4, 1, 1), bool)
        a[:2] = True
        b[1:3] = True
        assert dice(a, b) == pytest.approx(0.5)
        assert iou(a, b) == pytest.approx(1.0 / 3.0)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**30), p=st.floats(0.05, 0.95))
def test_dice_iou_identity(seed, p):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.random((6, 6, 6)) < p
    b = rng.random((6, 6, 6)) < p
    d, j = dice(a, b), iou(a, b)
    assert abs(d - 2.0 * j / (1.0 + j)) < 1e-12


class TestSimilarity:
    def vol(self, data):
        return ScalarVolume(VolumeGeometry(data.shape, (1, 1, 1)),
                            data.astype(np.float32))

    def test_ssim_self_is_one(self, rng):
        x = self.vol(rng.normal(size=(12, 12, 12)) * 100.0)
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_ssim_symmetric(self, rng):
        x = self.vol(rng.normal(size=(10, 10, 10)) * 50.0)
        y = self.vol(rng.normal(size=(10, 10, 10)) * 50.0)
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)

    def test_ssim_degrades_with_noise(self, rng):
        base = rng.normal(size=(14, 14, 14)) * 200.0
        x = self.vol(base)
        small = ssim(x, self.vol(base + rng.normal(size=base.shape) * 5.0))
        big = ssim(x, self.vol(base + rng.normal(size=base.shape) * 80.0))
        assert big < small < 1.0

    def test_ssim_errors(self, rng):
        x = self.vol(rng.normal(size=(8, 8, 8)))
        y = self.vol(rng.normal(size=(9, 8, 8)))
        with pytest.raises(AnalysisError):
            ssim(x, y)
        with pytest.raises(AnalysisError):
            ssim(x, x, roi=np.zeros((8, 8, 8), bool))
        flat = self.vol(np.zeros((8, 8, 8)))
        with pytest.raises(AnalysisError):
            ssim(flat, flat)

    def test_psnr_offset_known_value(self, rng):
        """Range 1000 with a constant offset 10 gives exactly 40 dB."""
        base = rng.uniform(0.0, 1.0, size=(16, 16, 16)) * 1000.0
        base.flat[0], base.flat[1] = 0.0, 1000.0  # pin the range
        x = self.vol(base)
        y = self.vol(base + 10.0)
        assert psnr(x, y) == pytest.approx(40.0, abs=0.01)

    def test_psnr_identical_is_inf(self, rng):
        x = self.vol(rng.normal(size=(8, 8, 8)) * 100.0)
        assert psnr(x, x) == math.inf

    def test_psnr_roi_restricts(self, rng):
        base = rng.uniform(0, 1000, size=(10, 10, 10))
        x = self.vol(base)
        noisy = base.copy()
        roi = np.zeros(base.shape, bool)
        roi[:5] = True
        noisy[~roi] += 500.0  # damage only outside the ROI
        assert psnr(x, self.vol(noisy), roi=roi) == math.inf


class TestScalarErrors:
    def test_mre(self):
        assert mre([90.0, 110.0], [100.0, 100.0]) == pytest.approx(0.1)

    def test_mre_errors(self):
        with pytest.raises(AnalysisError):
            mre([1.0], [1.0, 2.0])
        with pytest.raises(AnalysisError):
            mre([], [])
        with pytest.raises(AnalysisError):
            mre([1.0], [0.0])

    def test_fracture_distance(self):
        cents = {20: np.array([0.0, 0.0, 30.0]), 22: np.array([0.0, 0.0, -10.0])}
        assert fracture_distance(cents, 21) == pytest.approx(40.0)
        with pytest.raises(AnalysisError):
            fracture_distance(cents, 20)

    def test_cement_bound(self):
        b = cement_upper_bound(69.30, 62.41)
        assert b.ml == pytest.approx(6.89)
        assert not b.clamped

    def test_cement_bound_clamps(self):
        b = cement_upper_bound(50.0, 60.0)
        assert b.ml == 0.0
        assert b.clamped
        with pytest.raises(AnalysisError):
            cement_upper_bound(-1.0, 5.0)

    def test_volume_error_sign(self):
        err, re = volume_error(100.0, 90.0)
        assert err == pytest.approx(10.0)  # underestimation positive
        assert re == pytest.approx(10.0)
        err, re = volume_error(100.0, 110.0)
        assert err == pytest.approx(-10.0)
        assert re == pytest.approx(-10.0)

    def test_distance_error_sign(self):
        err, re = distance_error(40.0, 42.0)
        assert err == pytest.approx(2.0)  # over-restoration positive
        assert re == pytest.approx(5.0)


class TestReport:
    def make_report(self):
        r = PipelineReport(scale=1.02)
        row = VolumeRow(code=21, fractured_ml=45.0, inpainted_ml=68.0, pre_ml=70.0)
        row.fill_errors()
        r.volumes.append(row)
        srow = StraighteningRow(code=21, pair="L1-L3", fractured_mm=35.0,
                                straightened_mm=41.0, pre_mm=40.0)
        srow.fill_errors()
        r.straightening.append(srow)
        r.cement_ml[21] = cement_upper_bound(68.0, 45.0)
        r.metrics["psnr_db"] = math.inf
        r.metrics["ssim"] = 0.97
        return r

    def test_row_errors(self):
        r = self.make_report()
        assert r.volumes[0].error_ml == pytest.approx(2.0)
        assert r.volumes[0].re_pct == pytest.approx(2.0 / 70.0 * 100.0)
        assert r.straightening[0].error_mm == pytest.approx(1.0)
        assert r.straightening[0].re_pct == pytest.approx(2.5)

    def test_json_roundtrip(self):
        r = self.make_report()
        back = PipelineReport.from_json(r.to_json())
        assert back.scale == pytest.approx(r.scale)
        assert back.volumes[0].__dict__ == pytest.approx(r.volumes[0].__dict__)
        assert back.straightening[0].pair == "L1-L3"
        assert back.cement_ml[21] == r.cement_ml[21]
        assert back.metrics["psnr_db"] == math.inf
        assert back.metrics["ssim"] == pytest.approx(0.97)

    def test_json_inf_serialized_as_null_with_flag(self):
        doc = json.loads(self.make_report().to_json())
        assert doc["schema_version"] == 1
        assert doc["metrics"]["psnr_db"] is None
        assert doc["metric_flags"]["psnr_db"] == "identical"
        assert "ssim" not in doc["metric_flags"]

    def test_bad_schema(self):
        with pytest.raises(AnalysisError):
            PipelineReport.from_json('{"schema_version": 99, "scale": 1.0}')

    def test_text_rendering(self):
        text = self.make_report().to_text()
        assert "scale factor: 1.0200" in text
        assert "L2" in text and "L1-L3" in text
        assert "identical" in text  # inf metric rendered as a flag

    def test_aggregate_mean_std(self):
        r = PipelineReport(scale=1.0)
        for pre, inp in ((70.0, 68.0), (60.0, 57.0)):
            row = VolumeRow(code=21, fractured_ml=1.0, inpainted_ml=inp, pre_ml=pre)
            row.fill_errors()
            r.volumes.append(row)
        agg = r.aggregate()
        assert agg["volume_error_ml_mean"] == pytest.approx(2.5)
        assert agg["volume_error_ml_std"] == pytest.approx(np.std([2.0, 3.0], ddof=1))

    def test_aggregate_empty_without_truth(self):
        r = PipelineReport(scale=1.0)
        r.volumes.append(VolumeRow(code=21, fractured_ml=45.0, inpainted_ml=68.0))
        assert r.aggregate() == {}


class TestBuildReport:
    def test_with_truth(self, pipeline_inpaint, fractured_case):
        _, f_mask, f_truth = fractured_case
        run, result = pipeline_inpaint
        report = build_report(f_mask, run.mask, [result], run.scale, truth=f_truth)
        row = report.volumes[0]
        assert row.code == 21
        assert row.pre_ml == pytest.approx(f_truth.healthy_volumes_ml[21])
        assert row.error_ml == pytest.approx(row.pre_ml - row.inpainted_ml)
        assert report.cement_ml[21].ml == pytest.approx(
            max(0.0, row.inpainted_ml - row.fractured_ml))
        srow = report.straightening[0]
        assert srow.pair == "L1-L3"
        assert srow.pre_mm is not None and srow.error_mm is not None
        # serializes cleanly
        PipelineReport.from_json(report.to_json())

    def test_without_truth(self, pipeline_inpaint, fractured_case):
        _, f_mask, _ = fractured_case
        run, result = pipeline_inpaint
        report = build_report(f_mask, run.mask, [result], run.scale)
        row = report.volumes[0]
        assert row.pre_ml is None and row.error_ml is None and row.re_pct is None
        assert 21 in report.cement_ml
