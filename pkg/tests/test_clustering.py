import itertools
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daam import clustering
from daam.errors import ConfigError, NumericError


def exhaustive_optimum(points, k):
    """Best inertia over every assignment of points to k groups."""
    n = len(points)
    best = math.inf
    for assign in itertools.product(range(k), repeat=n):
        if len(set(assign)) < k:
            continue
        total = 0.0
        for j in range(k):
            members = points[[i for i in range(n) if assign[i] == j]]
            center = members.mean(axis=0)
            total += np.sum((members - center) ** 2)
        best = min(best, total)
    return best


class TestKmeans:
    def test_identical_points_single_cluster(self):
        pts = np.tile([1.5, -2.0], (6, 1))
        model = clustering.kmeans_pp(pts, 1, seed=0)
        npt.assert_allclose(model.centers[0], [1.5, -2.0])
        assert model.inertia == 0.0

    def test_k_equals_n(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((5, 3))
        model = clustering.kmeans_pp(pts, 5, seed=2)
        assert model.inertia < 1e-20
        assert sorted(model.labels.tolist()) == [0, 1, 2, 3, 4]

    def test_two_well_separated_pairs(self):
        pts = np.array([[0.0], [0.1], [10.0], [10.1]])
        model = clustering.kmeans_pp(pts, 2, seed=3)
        centers = sorted(model.centers.reshape(-1).tolist())
        npt.assert_allclose(centers, [0.05, 10.05], atol=1e-12)
        npt.assert_allclose(model.inertia, 0.01, atol=1e-12)
        assert model.inertia <= 1.05 * exhaustive_optimum(pts, 2)

    def test_near_optimal_vs_exhaustive(self):
        # empirical check of the k-means++ approximation quality
        rng = np.random.default_rng(4)
        for seed in range(20):
            n = int(rng.integers(4, 9))
            k = int(rng.integers(2, 4))
            pts = rng.standard_normal((n, 2)) * 2.0
            model = clustering.kmeans_pp(pts, k, seed=seed)
            opt = exhaustive_optimum(pts, k)
            assert model.inertia <= 1.05 * opt + 1e-12, (seed, model.inertia, opt)

    def test_lloyd_descent(self):
        rng = np.random.default_rng(5)
        for seed in range(10):
            pts = rng.standard_normal((40, 4))
            model = clustering.kmeans_pp(pts, 5, seed=seed)
            hist = model.inertia_history
            assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_centers_are_cluster_means(self):
        rng = np.random.default_rng(6)
        pts = rng.standard_normal((30, 3))
        model = clustering.kmeans_pp(pts, 4, seed=7)
        for j in range(4):
            members = pts[model.labels == j]
            if len(members):
                npt.assert_allclose(model.centers[j], members.mean(axis=0),
                                    atol=1e-9)

    def test_too_few_points(self):
        with pytest.raises(ConfigError):
            clustering.kmeans_pp(np.zeros((2, 2)), 3, seed=0)

    def test_non_finite_rejected(self):
        pts = np.array([[0.0, 1.0], [np.nan, 2.0]])
        with pytest.raises(NumericError):
            clustering.kmeans_pp(pts, 1, seed=0)

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        pts = rng.standard_normal((25, 4))
        a = clustering.kmeans_pp(pts, 3, seed=9)
        b = clustering.kmeans_pp(pts, 3, seed=9)
        npt.assert_array_equal(a.labels, b.labels)
        npt.assert_array_equal(a.centers, b.centers)
        npt.assert_array_equal(a.weights, b.weights)


class TestAssignment:
    def test_exact_center_match(self):
        centers = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, -3.0]])
        assert clustering.assign_weak_label(np.array([5.0, -3.0]), centers) == 2

    def test_tie_breaks_low_index(self):
        centers = np.array([[-1.0], [1.0]])
        assert clustering.assign_weak_label(np.array([0.0]), centers) == 0

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            centers = rng.standard_normal((5, 4))
            p = rng.standard_normal(4)
            got = clustering.assign_weak_label(p, centers)
            d2 = [np.sum((p - c) ** 2) for c in centers]
            assert got == int(np.argmin(d2))

    def test_assignment_optimality(self):
        rng = np.random.default_rng(11)
        pts = rng.standard_normal((40, 3))
        model = clustering.kmeans_pp(pts, 6, seed=12)
        d2 = np.sum((pts[:, None] - model.centers[None]) ** 2, axis=2)
        own = d2[np.arange(40), model.labels]
        assert np.all(own[:, None] <= d2 + 1e-12)


class TestWeights:
    def test_zero_distance(self):
        c = np.array([1.0, 2.0])
        assert clustering.confidence_weight(c, c) == 0.5

    def test_log_three_distance(self):
        # squared distance ln 3 -> 1/(1+3) = 0.25
        c = np.zeros(1)
        p = np.array([math.sqrt(math.log(3.0))])
        npt.assert_allclose(clustering.confidence_weight(p, c), 0.25, atol=1e-10)

    def test_large_distance_above_floor(self):
        c = np.zeros(1)
        p = np.array([math.sqrt(50.0)])
        w = clustering.confidence_weight(p, c)
        npt.assert_allclose(w, 1.0 / (1.0 + math.exp(50.0)), rtol=1e-10)
        assert w == pytest.approx(1.93e-22, rel=1e-2)
        assert w > 1e-30

    def test_overflow_guard(self):
        c = np.zeros(1)
        p = np.array([1e6])
        w = clustering.confidence_weight(p, c)
        assert w == 1e-30

    # distances capped so weights stay above the 1e-30 floor (d^2 < ~68)
    @given(st.floats(0.0, 8.0), st.floats(0.0, 8.0))
    @settings(max_examples=60, deadline=None)
    def test_weight_monotone_decreasing(self, d1, d2):
        c = np.zeros(1)
        w1 = clustering.confidence_weight(np.array([d1]), c)
        w2 = clustering.confidence_weight(np.array([d2]), c)
        assert 0.0 < w1 <= 0.5 and 0.0 < w2 <= 0.5
        if d1 < d2:
            assert w1 >= w2
            if d2 * d2 - d1 * d1 > 1e-12:  # distinguishable at float64
                assert w1 > w2


class TestRelabel:
    def test_two_blobs_recovered(self):
        rng = np.random.default_rng(13)
        blob0 = rng.standard_normal((20, 4)) * 0.1
        blob1 = rng.standard_normal((20, 4)) * 0.1 + 8.0
        feats = np.vstack([blob0, blob1])
        truth = np.array([0] * 20 + [1] * 20)
        model = clustering.relabel_dataset(feats, 2, seed=14)
        # perfect agreement up to label permutation
        same = (model.labels == truth).mean()
        assert same in (0.0, 1.0)

    def test_k_equals_count_all_weights_half(self):
        rng = np.random.default_rng(15)
        feats = rng.standard_normal((8, 3))
        model = clustering.relabel_dataset(feats, 8, seed=16)
        npt.assert_allclose(model.weights, 0.5, atol=1e-12)

    def test_same_seed_identical(self):
        rng = np.random.default_rng(17)
        feats = rng.standard_normal((30, 5))
        a = clustering.relabel_dataset(feats, 4, seed=18)
        b = clustering.relabel_dataset(feats, 4, seed=18)
        npt.assert_array_equal(a.labels, b.labels)
        npt.assert_array_equal(a.weights, b.weights)


class TestExport:
    def test_json_round_trip(self):
        rng = np.random.default_rng(19)
        model = clustering.kmeans_pp(rng.standard_normal((12, 3)), 3, seed=20)
        back = clustering.ClusterModel.from_json(model.to_json())
        assert back.k == model.k
        npt.assert_array_equal(back.labels, model.labels)
        npt.assert_allclose(back.centers, model.centers)
        npt.assert_allclose(back.weights, model.weights)
        assert back.inertia == model.inertia

    def test_default_cluster_count(self):
        assert clustering.default_cluster_count(751) == 650
        assert clustering.default_cluster_count(32) == round(650 / 751 * 32)
        assert clustering.default_cluster_count(1) == 1
