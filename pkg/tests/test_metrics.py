import math

import numpy as np
import pytest
from scipy import stats

from latentseg.metrics import asd, benjamini_hochberg, border, dsc, paired_tests, wilcoxon_signed_rank
from oracles import asd_oracle, bh_oracle, border_oracle, dsc_oracle, random_masks, wilcoxon_enumeration


class TestDSC:
    def test_identical(self):
        m = np.random.default_rng(0).random((5, 5)) > 0.5
        assert dsc(m, m) == 100.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[0], b[1] = True, True
        assert dsc(a, b) == 0.0

    def test_hand_count(self):
        a = np.array([1, 1, 1, 1, 0, 0])
        b = np.array([0, 0, 1, 1, 1, 1])
        assert dsc(a, b) == 50.0

    def test_both_empty(self):
        assert dsc(np.zeros(3), np.zeros(3)) == 100.0

    def test_label_selection(self):
        assert dsc(np.array([2, 2, 3]), np.array([2, 3, 3]), label=3) == pytest.approx(100 * 2 / 3)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            dsc(np.zeros(3), np.zeros(4))

    def test_symmetry_and_permutation(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = random_masks(rng, 8)
            perm = rng.permutation(a.size)
            assert dsc(a, b) == dsc(b, a)
            assert dsc(a.ravel()[perm], b.ravel()[perm]) == dsc(a, b)

    def test_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = random_masks(rng)
            assert dsc(a, b) == dsc_oracle(a, b)


class TestASD:
    def test_identical(self):
        a, _ = random_masks(np.random.default_rng(3))
        a[4:8, 4:8, 4:8] = True
        assert asd(a, a) == 0.0

    def test_single_voxels(self):
        a = np.zeros((8, 8, 8), bool)
        b = a.copy()
        a[1, 1, 1], b[1, 1, 4] = True, True
        assert asd(a, b) == 3.0

    def test_empty_is_undefined(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        b[0, 0] = True
        assert math.isnan(asd(a, b)) and math.isnan(asd(b, a))

    def test_border_face_connectivity(self):
        m = np.zeros((5, 5), bool)
        m[1:4, 1:4] = True
        expected = m.copy()
        expected[2, 2] = False
        np.testing.assert_array_equal(border(m), expected)
        full = np.ones((3, 3), bool)
        # the volume boundary counts as outside, so only the center is interior
        assert border(full).sum() == 8 and not border(full)[1, 1]

    def test_symmetry_translation_scaling(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a, b = random_masks(rng)
            if not a.any() or not b.any():
                continue
            assert asd(a, b) == pytest.approx(asd(b, a), rel=1e-12)
            pad = ((2, 0), (0, 0), (0, 0))
            assert asd(np.pad(a, pad), np.pad(b, pad)) == pytest.approx(asd(a, b), rel=1e-12)
            assert asd(a, b, spacing=0.5) == pytest.approx(0.5 * asd(a, b), rel=1e-12)

    def test_oracle(self):
        rng = np.random.default_rng(5)
        checked = 0
        for _ in range(50):
            a, b = random_masks(rng)
            np.testing.assert_array_equal(border(a), border_oracle(a))
            if a.any() and b.any():
                assert asd(a, b) == asd_oracle(a, b)
                checked += 1
        assert checked > 20


class TestWilcoxon:
    def test_degenerate(self):
        r = wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
        assert r.degenerate and math.isnan(r.p)

    def test_all_positive_n6(self):
        r = wilcoxon_signed_rank(np.arange(6) + 1.0, np.zeros(6))
        assert r.p == 2 / 64 and r.method == "exact"

    def test_textbook_example(self):
        # Classic paired example (differences with one tie and one zero); checked three ways.
        x = np.array([125, 115, 130, 140, 140, 115, 140, 125, 140, 135], float)
        y = np.array([110, 122, 125, 120, 140, 124, 123, 137, 135, 145], float)
        r = wilcoxon_signed_rank(x, y)
        assert r.n == 9 and r.statistic == 27.0
        assert r.p == pytest.approx(wilcoxon_enumeration(x - y), abs=1e-12)
        assert r.p == pytest.approx(0.6328125, abs=1e-3)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(1, 11))
            d = np.round(rng.normal(size=n), 1)  # rounding creates ties and zeros
            p = wilcoxon_signed_rank(d, np.zeros(n)).p
            if np.all(d == 0):
                assert math.isnan(p)
            else:
                assert p == pytest.approx(wilcoxon_enumeration(d), abs=1e-12)

    def test_matches_scipy_without_ties(self):
        rng = np.random.default_rng(7)
        for n in (8, 15, 25):
            x, y = rng.normal(size=n), rng.normal(size=n)
            ref = stats.wilcoxon(x, y, method="exact").pvalue
            assert wilcoxon_signed_rank(x, y).p == pytest.approx(ref, rel=1e-9)

    def test_normal_approximation(self):
        rng = np.random.default_rng(8)
        x, y = rng.normal(size=40), rng.normal(size=40)
        r = wilcoxon_signed_rank(x, y)
        ref = stats.wilcoxon(x, y, method="approx", correction=False).pvalue
        assert r.method == "normal" and r.p == pytest.approx(ref, rel=1e-9)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2], [1])


class TestBH:
    def test_hand_example(self):
        np.testing.assert_allclose(benjamini_hochberg([0.01, 0.02, 0.04]).adjusted, [0.03, 0.03, 0.04])

    def test_single(self):
        assert benjamini_hochberg([0.3]).adjusted.tolist() == [0.3]

    def test_all_one(self):
        r = benjamini_hochberg([1.0] * 4)
        assert r.adjusted.tolist() == [1.0] * 4 and not r.rejected.any()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            benjamini_hochberg([0.5, 1.2])

    def test_nan_carried(self):
        r = benjamini_hochberg([0.01, math.nan])
        assert r.adjusted[0] == 0.01 and math.isnan(r.adjusted[1]) and not r.rejected[1]

    def test_matches_step_up_definition(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            p = rng.random(int(rng.integers(1, 12))) ** 3
            r = benjamini_hochberg(p, 0.05)
            adj, rej = bh_oracle(p, 0.05)
            np.testing.assert_allclose(r.adjusted, adj, rtol=1e-12)
            np.testing.assert_array_equal(r.rejected, rej)
            assert np.all(r.adjusted >= p - 1e-15)
            order = np.argsort(p, kind="stable")
            assert np.all(np.diff(r.adjusted[order]) >= -1e-15)


class TestPaired:
    def test_per_key_and_correction(self):
        a = {"x": np.arange(6) + 1.0, "y": np.zeros(6)}
        b = {"x": np.zeros(6), "y": np.zeros(6)}
        res = paired_tests(a, b)
        assert res.names == ("x", "y")
        assert res.raw_p[0] == 2 / 64 and math.isnan(res.raw_p[1])
        assert res.adjusted_p[0] == 2 / 64
