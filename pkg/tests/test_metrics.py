import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dice_bruteforce, hd95_bruteforce, iou_bruteforce
from serdiff.metrics import (
    AccMatrix,
    UndefinedMetricError,
    dice,
    forgetting_rate,
    hd95,
    iou,
    mean_class_dice,
)

masks = arrays(np.bool_, (8, 8))
nonempty = masks.filter(lambda m: m.any())


def _pix(*coords, shape=(6, 6)):
    m = np.zeros(shape, dtype=bool)
    for c in coords:
        m[c] = True
    return m


class TestDice:
    def test_identical(self):
        m = _pix((1, 1), (2, 3))
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        assert dice(_pix((0, 0)), _pix((5, 5))) == 0.0

    def test_half_overlap(self):
        assert dice(_pix((0, 0), (0, 1)), _pix((0, 1), (0, 2))) == 0.5

    def test_both_empty(self):
        z = np.zeros((4, 4), bool)
        assert dice(z, z) == 1.0 and iou(z, z) == 1.0

    def test_one_empty(self):
        z = np.zeros((6, 6), bool)
        assert dice(z, _pix((1, 1))) == 0.0 and iou(_pix((1, 1)), z) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((3, 3)), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            iou(np.zeros((3, 3)), np.zeros((3, 4)))


class TestIoU:
    def test_identical(self):
        m = _pix((2, 2))
        assert iou(m, m) == 1.0

    def test_third(self):
        assert iou(_pix((0, 0), (0, 1)), _pix((0, 1), (0, 2))) == pytest.approx(1 / 3, abs=1e-15)

    def test_disjoint(self):
        assert iou(_pix((0, 0)), _pix((3, 3))) == 0.0


class TestHD95:
    def test_identical(self):
        m = _pix((1, 1), (1, 2), (2, 1), (2, 2))
        assert hd95(m, m) == 0.0

    def test_single_pixels(self):
        assert hd95(_pix((1, 1)), _pix((1, 4))) == 3.0

    def test_empty_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            hd95(np.zeros((4, 4), bool), _pix((1, 1), shape=(4, 4)))

    def test_spacing_scales_linearly(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((16, 16)) < 0.3, rng.random((16, 16)) < 0.3
        assert hd95(a, b, spacing_mm=2.5) == pytest.approx(2.5 * hd95(a, b), rel=1e-12)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.random((16, 16)) < rng.uniform(0.05, 0.6), rng.random((16, 16)) < rng.uniform(0.05, 0.6)
            if a.any() and b.any():
                assert abs(hd95(a, b) - hd95_bruteforce(a, b)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_overlap_symmetry_and_oracles(a, b):
    assert dice(a, b) == dice(b, a)
    assert iou(a, b) == iou(b, a)
    assert dice(a, b) == pytest.approx(dice_bruteforce(a, b), abs=1e-15)
    assert iou(a, b) == pytest.approx(iou_bruteforce(a, b), abs=1e-15)
    if a.any() or b.any():
        j = iou(a, b)
        assert abs(dice(a, b) - 2 * j / (1 + j)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(nonempty, nonempty)
def test_hd95_symmetric(a, b):
    assert hd95(a, b) == hd95(b, a)
    assert hd95(a, b) >= 0


def _one_hot(labels, c=4):
    return np.eye(c, dtype=np.float32)[labels].transpose(2, 0, 1)


class TestMeanClassDice:
    def test_identity(self):
        lab = np.random.default_rng(0).integers(0, 4, (8, 8))
        assert mean_class_dice(_one_hot(lab), _one_hot(lab)) == 1.0

    def test_all_background_prediction(self):
        lab = np.zeros((8, 8), int)
        lab[0, 0], lab[1, 1], lab[2, 2] = 1, 2, 3
        assert mean_class_dice(_one_hot(np.zeros((8, 8), int)), _one_hot(lab)) == 0.0

    def test_composes_binary_dice(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p, g = rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))
            expected = sum(dice_bruteforce(p == c, g == c) for c in (1, 2, 3)) / 3
            assert mean_class_dice(_one_hot(p), _one_hot(g)) == pytest.approx(expected, abs=1e-15)

    def test_rejects_non_one_hot(self):
        bad = np.zeros((4, 3, 3))
        with pytest.raises(ValueError):
            mean_class_dice(bad, bad)


class TestForgettingRate:
    def test_two_tasks(self):
        m = AccMatrix.from_rows([[0.9, 0.8], [0.7]])
        assert abs(forgetting_rate(m) - 0.1) < 1e-12

    def test_constant_rows(self):
        m = AccMatrix.from_rows([[0.6, 0.6, 0.6], [0.5, 0.5], [0.4]])
        assert forgetting_rate(m) == 0.0

    def test_three_tasks(self):
        m = AccMatrix.from_rows([[0.9, 0.85, 0.8], [0.88, 0.86], [0.9]])
        assert abs(forgetting_rate(m) - 0.06) < 1e-12

    def test_needs_two_tasks(self):
        with pytest.raises(UndefinedMetricError):
            forgetting_rate(AccMatrix.from_rows([[0.5]]))

    def test_incomplete_matrix(self):
        m = AccMatrix(2)
        m.set(0, 0, 0.5)
        with pytest.raises(ValueError):
            forgetting_rate(m)

    def test_lower_triangle_rejected(self):
        with pytest.raises(ValueError):
            AccMatrix(3).set(2, 1, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 5).flatmap(
        lambda k: st.lists(st.floats(0, 1), min_size=k * (k + 1) // 2, max_size=k * (k + 1) // 2)
        .map(lambda v, k=k: (k, v))))
    def test_non_negative(self, kv):
        k, values = kv
        rows, it = [], iter(values)
        for i in range(k):
            rows.append([next(it) for _ in range(k - i)])
        assert forgetting_rate(AccMatrix.from_rows(rows)) >= 0.0

    def test_csv_round_trip(self):
        m = AccMatrix.from_rows([[0.9, 0.85, 0.8], [0.88, 0.86], [0.9]])
        text = m.to_csv()
        assert text.splitlines()[0] == "# serdiff-accmatrix/1"
        assert text.splitlines()[3] == "2,,0.88,0.86"
        back = AccMatrix.from_csv(text)
        np.testing.assert_array_equal(np.nan_to_num(back.acc, nan=-1), np.nan_to_num(m.acc, nan=-1))
        assert math.isnan(back.acc[2, 0])
