import numpy as np
import pytest

from vesselseg.metrics import (CSV_HEADER, CaseMetrics, MetricsReport, boundary_voxels, evaluate_case,
                               hd95, overlap_metrics)
from vesselseg.tensor import ShapeError

from oracles import boundary_oracle, hd95_oracle


def random_pair(rng):
    shape = tuple(rng.integers(1, 17, size=3))
    a = rng.random(shape) < rng.uniform(0.05, 0.6)
    b = rng.random(shape) < rng.uniform(0.05, 0.6)
    a.flat[rng.integers(a.size)] = True
    b.flat[rng.integers(b.size)] = True
    return a, b


class TestOverlap:
    def test_identical(self):
        m = np.zeros((3, 3, 3), bool)
        m[1, 1, :] = True
        ov = overlap_metrics(m, m)
        assert (ov.dice, ov.iou, ov.precision, ov.recall) == (100.0, 100.0, 100.0, 100.0)
        assert not ov.empty

    def test_empty_prediction(self):
        gt = np.ones((2, 2, 2), bool)
        ov = overlap_metrics(np.zeros_like(gt), gt)
        assert ov.dice == 0.0 and ov.iou == 0.0 and ov.recall == 0.0
        assert ov.precision == 100.0 and ov.empty == {"precision"}

    def test_hand_counts(self):
        # TP=6, FP=2, FN=2 needs ten distinct voxels, so the fixture is 3x3x2
        gt = np.zeros(18, bool)
        pred = np.zeros(18, bool)
        gt[:8] = True
        pred[[0, 1, 2, 3, 4, 5, 8, 9]] = True
        ov = overlap_metrics(pred.reshape(3, 3, 2), gt.reshape(3, 3, 2))
        assert (ov.dice, ov.iou, ov.precision, ov.recall) == (75.0, 60.0, 75.0, 75.0)

    def test_dice_iou_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = random_pair(rng)
            ov = overlap_metrics(a, b)
            if "iou" in ov.empty:
                continue
            iou = ov.iou / 100
            assert abs(ov.dice / 100 - 2 * iou / (1 + iou)) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            overlap_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestBoundary:
    def test_solid_cube_interior_excluded(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 1:4, 1:4] = True
        b = boundary_voxels(m)
        assert len(b) == 26 and [2, 2, 2] not in b.tolist()

    def test_volume_edge_counts_as_outside(self):
        assert len(boundary_voxels(np.ones((3, 3, 3), bool))) == 26

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        m = rng.random((6, 7, 5)) < 0.6
        assert sorted(map(tuple, boundary_voxels(m))) == sorted(map(tuple, boundary_oracle(m)))


class TestHD95:
    def test_identical_is_zero(self):
        m = np.zeros((4, 4, 4), bool)
        m[1:3, 1:3, 1:3] = True
        assert hd95(m, m) == 0.0

    def test_single_voxels_offset(self):
        a = np.zeros((6, 3, 3), bool)
        b = np.zeros((6, 3, 3), bool)
        a[1, 1, 1] = True
        b[4, 1, 1] = True
        assert hd95(a, b, (1.0, 1.0, 1.0)) == 3.0

    def test_spacing_scales(self):
        a = np.zeros((6, 3, 3), bool)
        b = np.zeros((6, 3, 3), bool)
        a[1, 1, 1] = True
        b[4, 1, 1] = True
        assert hd95(a, b, (2.5, 1.0, 1.0)) == 7.5

    def test_offset_cubes(self):
        a = np.zeros((5, 5, 8), bool)
        b = np.zeros((5, 5, 8), bool)
        a[1:4, 1:4, 1:4] = True
        b[1:4, 1:4, 3:6] = True
        assert hd95(a, b) == hd95_oracle(a, b)

    def test_empty_is_undefined(self):
        a = np.zeros((3, 3, 3), bool)
        b = a.copy()
        b[1, 1, 1] = True
        assert hd95(a, b) is None and hd95(b, a) is None

    def test_random_pairs_match_oracle_and_are_symmetric(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a, b = random_pair(rng)
            sp = tuple(rng.uniform(0.5, 2.0, 3))
            h = hd95(a, b, sp)
            assert h == pytest.approx(hd95_oracle(a, b, sp), abs=1e-9)
            assert h == hd95(b, a, sp)


class TestReport:
    def fixture_report(self):
        rep = MetricsReport()
        rep.add(CaseMetrics("case_a", 90.0, 81.818181, 92.5, 87.6, 2.0))
        rep.add(CaseMetrics("case_b", 80.0, 66.666666, 70.0, 93.33333, None))
        return rep

    def test_csv_exact(self):
        expected = (
            "case_id,dice,iou,precision,recall,hd95_mm\n"
            "case_a,90.0000,81.8182,92.5000,87.6000,2.0000\n"
            "case_b,80.0000,66.6667,70.0000,93.3333,NA\n"
            "mean,85.0000,74.2424,81.2500,90.4667,2.0000\n"
            "std,5.0000,7.5758,11.2500,2.8667,0.0000\n"
        )
        assert self.fixture_report().to_csv() == expected

    def test_header(self):
        assert CSV_HEADER == "case_id,dice,iou,precision,recall,hd95_mm"

    def test_hd95_defined_count(self):
        assert self.fixture_report().hd95_defined == 1

    def test_write_csv(self, tmp_path):
        rep = self.fixture_report()
        rep.write_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_bytes() == rep.to_csv().encode()

    def test_evaluate_case(self):
        m = np.zeros((4, 4, 4), np.uint8)
        m[1:3, 1:3, 1:3] = 1
        row = evaluate_case("x", m, m, (1, 1, 1))
        assert row.dice == 100.0 and row.hd95_mm == 0.0
