import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

import oracles
from nhmcal.design import (
    Design,
    InputRegion,
    PairMask,
    maximin_lhs,
    reduce_region,
    region_volume_fraction,
)

CENTER = np.array([0.3, -0.2])
CURVATURE = np.array([40.0, 90.0])


def quadratic(X):
    return -np.sum(CURVATURE * (np.atleast_2d(X) - CENTER) ** 2, axis=1)


BOX = InputRegion([-2.0, -2.0], [2.0, 2.0])


class TestRegion:
    def test_contains_box(self):
        r = InputRegion([0, 0], [1, 2])
        np.testing.assert_array_equal(r.contains([[0.5, 1.0], [1.5, 1.0], [1.0, 2.0]]), [True, False, True])

    def test_mask_and_point_test_agree(self):
        allowed = np.zeros((4, 4), dtype=bool)
        allowed[1:3, 0:2] = True
        r = InputRegion([0, 0, 0], [1, 1, 1], [PairMask(0, 2, 0, 1, 0, 1, allowed)])
        X = np.random.default_rng(0).random((2000, 3))
        inside = r.point_test()
        np.testing.assert_array_equal(r.contains(X), [inside(x) for x in X])
        assert 0.2 < r.contains(X).mean() < 0.3

    def test_roundtrip(self, tmp_path):
        allowed = np.eye(8, dtype=bool)
        r = InputRegion([0, 1], [2, 3], [PairMask(0, 1, 0, 2, 1, 3, allowed)])
        r.save(tmp_path / "r.json")
        back = InputRegion.load(tmp_path / "r.json")
        X = np.random.default_rng(1).random((500, 2)) * 2 + [0, 1]
        np.testing.assert_array_equal(back.contains(X), r.contains(X))

    def test_rejects_empty_interval(self):
        with pytest.raises(ValueError):
            InputRegion([0, 1], [1, 1])


class TestMaximinLHS:
    def test_latin_property(self):
        d = maximin_lhs(50, InputRegion([0, 10, -1], [1, 20, 1]), seed=3)
        assert len(d) == 50
        U = InputRegion([0, 10, -1], [1, 20, 1]).to_unit(d.points)
        for j in range(3):
            np.testing.assert_array_equal(np.sort(np.floor(U[:, j] * 50)), np.arange(50))
            np.testing.assert_array_equal(np.sort(d.strata[:, j]), np.arange(50))

    def test_keeps_best_candidate(self):
        d = maximin_lhs(30, BOX, seed=1, restarts=15)
        assert d.min_distance == pytest.approx(d.candidate_min_distances.max())
        assert pdist(BOX.to_unit(d.points)).min() == pytest.approx(d.min_distance)

    def test_restarts_do_not_hurt(self):
        one = maximin_lhs(30, BOX, seed=1, restarts=1)
        many = maximin_lhs(30, BOX, seed=1, restarts=25)
        assert many.min_distance >= one.min_distance

    def test_deterministic(self):
        a = maximin_lhs(20, BOX, seed=(4, 2))
        b = maximin_lhs(20, BOX, seed=(4, 2))
        np.testing.assert_array_equal(a.points, b.points)

    def test_respects_masks(self):
        allowed = np.zeros((8, 8), dtype=bool)
        allowed[2:6, 2:6] = True
        r = InputRegion([0, 0], [1, 1], [PairMask(0, 1, 0, 1, 0, 1, allowed)])
        d = maximin_lhs(40, r, seed=0)
        assert len(d) > 0
        assert r.contains(d.points).all()

    def test_unreachable_region(self):
        r = InputRegion([0, 0], [1, 1], [PairMask(0, 1, 0, 1, 0, 1, np.zeros((8, 8), dtype=bool))])
        with pytest.raises(ValueError):
            maximin_lhs(10, r, seed=0, max_redraws=3, max_swaps=3)

    def test_dict_roundtrip(self):
        d = maximin_lhs(12, BOX, seed=2, wave=1)
        back = Design.from_dict(d.to_dict())
        np.testing.assert_array_equal(back.points, d.points)
        assert back.wave == 1


class TestReduceRegion:
    def _design(self, n=4000, seed=0):
        X = BOX.from_unit(np.random.default_rng(seed).random((n, 2)))
        return X, quadratic(X)

    def test_superlevel_set_within_one_bin(self):
        X, f = self._design()
        reduced = reduce_region(X, f, BOX, -40.0)
        lo, hi = oracles.quadratic_superlevel_box(CENTER, CURVATURE, -40.0 + f.max(), BOX.lower, BOX.upper)
        bin_width = BOX.width / 8
        assert np.all(reduced.lower <= lo + 1e-12) and np.all(reduced.upper >= hi - 1e-12)
        assert np.all(reduced.lower >= lo - bin_width) and np.all(reduced.upper <= hi + bin_width)

    def test_dense_grid_points_of_the_level_set_are_kept(self):
        X, f = self._design()
        reduced = reduce_region(X, f, BOX, -40.0)
        G = oracles.dense_grid(BOX.lower, BOX.upper, 201)
        keep = quadratic(G) >= f.max() - 40.0
        # cells holding a design point above the cut-off are never removed; away from
        # sparsely sampled cell corners every super-level point survives
        assert reduced.contains(G[keep]).mean() > 0.99

    def test_monotone_in_threshold(self):
        X, f = self._design(seed=1)
        fractions = [region_volume_fraction(reduce_region(X, f, BOX, t), BOX, seed=0)[0]
                     for t in (-5.0, -20.0, -40.0, -80.0, -200.0)]
        assert all(a <= b for a, b in zip(fractions, fractions[1:]))

    def test_vacuous_threshold(self):
        X, f = self._design(200)
        r = reduce_region(X, f, BOX, -np.inf)
        np.testing.assert_array_equal(r.lower, BOX.lower)
        np.testing.assert_array_equal(r.upper, BOX.upper)
        assert r.masks == []

    def test_cells_without_points_are_kept(self):
        # only the cell holding the poor point is ruled out; the empty corner stays
        X = np.array([[-1.9, -1.9], [1.9, 1.9], [1.9, -1.0], [-1.0, 1.9]])
        r = reduce_region(X, np.array([0.0, -100.0, 0.0, 0.0]), BOX, -40.0)
        assert r.contains([[-1.9, 1.9], [1.9, -1.9], [-1.9, -1.9]]).all()
        assert not r.contains([[1.9, 1.9]]).any()

    def test_reduction_is_nested(self):
        X, f = self._design(seed=2)
        first = reduce_region(X, f, BOX, -40.0)
        inside = first.contains(X)
        second = reduce_region(X[inside], f[inside], first, -40.0)
        G = BOX.from_unit(np.random.default_rng(5).random((20000, 2)))
        assert not np.any(second.contains(G) & ~first.contains(G))

    @given(st.floats(-100, -1), st.floats(-100, -1))
    @settings(max_examples=25, deadline=None)
    def test_monotone_property(self, t1, t2):
        X, f = self._design(800, seed=3)
        tight, loose = sorted((t1, t2), reverse=True)
        a = reduce_region(X, f, BOX, tight)
        b = reduce_region(X, f, BOX, loose)
        G = BOX.from_unit(np.random.default_rng(6).random((3000, 2)))
        assert not np.any(a.contains(G) & ~b.contains(G))


class TestVolumeFraction:
    def test_exact_for_boxes(self):
        frac, se = region_volume_fraction(InputRegion([0, 0], [0.5, 0.5]), InputRegion([0, 0], [1, 1]))
        assert frac == 0.25 and se == 0.0

    def test_monte_carlo_with_mask(self):
        allowed = np.zeros((8, 8), dtype=bool)
        allowed[:4] = True
        after = InputRegion([0, 0], [1, 1], [PairMask(0, 1, 0, 1, 0, 1, allowed)])
        frac, se = region_volume_fraction(after, InputRegion([0, 0], [1, 1]), mc_points=40000)
        assert abs(frac - 0.5) < 4 * se
