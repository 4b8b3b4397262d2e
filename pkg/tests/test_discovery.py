import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import best_two_partition_inertia

from odin.discovery import (
    SegmentationCache,
    cache_get_or_compute,
    discover,
    kmeans,
    proposal_pyramid,
    upsample_labels,
)
from odin.model import ModelConfig, features, init_params


def inertia_of(x, labels, K):
    return sum(((x[labels == k] - x[labels == k].mean(0)) ** 2).sum() for k in range(K) if (labels == k).any())


class TestKMeans:
    def test_single_cluster(self):
        x = np.random.default_rng(0).normal(size=(4, 5, 3))
        r = kmeans(x, 1, normalize=False)
        assert (r.labels == 0).all() and r.labels.shape == (4, 5)
        np.testing.assert_allclose(r.centroids[0], x.reshape(-1, 3).mean(0))

    def test_two_identical_groups(self):
        x = np.array([[1.0, 0.0]] * 5 + [[0.0, 1.0]] * 3)
        r = kmeans(x, 2, seed=3)
        assert r.inertia == 0.0
        assert len(set(r.labels[:5])) == 1 and len(set(r.labels[5:])) == 1
        assert r.labels[0] != r.labels[5]

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_exhaustive_partition(self, seed):
        rng = np.random.default_rng(seed)
        x = np.concatenate([rng.normal(0, 0.3, (4, 2)), rng.normal(2, 0.3, (4, 2))])
        best, labels = best_two_partition_inertia(x.tolist())
        r = kmeans(x, 2, seed=seed, normalize=False, n_init=5)
        assert r.inertia == pytest.approx(best, rel=1e-9)
        same = [labels[i] == labels[0] for i in range(8)]
        assert [r.labels[i] == r.labels[0] for i in range(8)] == same

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), K=st.integers(1, 6))
    def test_fixed_point_and_monotone(self, seed, K):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(30, 3))
        r = kmeans(x, K, seed=seed, normalize=False)
        assert all(b <= a + 1e-9 for a, b in zip(r.history, r.history[1:]))
        d = ((x[:, None] - r.centroids[None]) ** 2).sum(-1)
        own = d[np.arange(30), r.labels]
        assert (own <= d.min(1) + 1e-9).all()
        for k in range(K):
            if (r.labels == k).any():
                np.testing.assert_allclose(r.centroids[k], x[r.labels == k].mean(0), atol=1e-12)
        assert r.labels.min() >= 0 and r.labels.max() < K
        assert r.inertia == pytest.approx(inertia_of(x, r.labels, K))

    def test_features_are_normalized(self):
        x = np.array([[1.0, 0.0], [10.0, 0.0], [0.0, 1.0], [0.0, 7.0]])
        r = kmeans(x, 2, seed=0)
        assert r.inertia == pytest.approx(0.0, abs=1e-12)

    def test_deterministic(self):
        x = np.random.default_rng(1).normal(size=(8, 8, 4))
        a, b = kmeans(x, 5, seed=9), kmeans(x, 5, seed=9)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_seed_changes_labels_not_partition(self):
        x = np.array([[1.0, 0.0]] * 4 + [[0.0, 1.0]] * 4 + [[-1.0, 0.0]] * 4)
        parts = set()
        for seed in range(6):
            labels = kmeans(x, 3, seed=seed).labels
            parts.add(frozenset(frozenset(np.flatnonzero(labels == k)) for k in range(3)))
        assert len(parts) == 1

    def test_errors(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((2, 2, 3)), 5)
        with pytest.raises(ValueError):
            kmeans(np.zeros((4, 0)), 1)

    def test_every_cell_own_segment(self):
        x = np.random.default_rng(2).normal(size=(3, 3, 4))
        labels = kmeans(x, 9, seed=0).labels
        assert len(np.unique(labels)) == 9


class TestDiscover:
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(0))

    def two_halves(self):
        img = np.zeros((32, 32, 3))
        img[:, :16] = [0.9, 0.2, 0.1]
        img[:, 16:] = [0.1, 0.3, 0.9]
        return img

    @pytest.mark.parametrize("source", ["hidden", "projection"])
    def test_is_kmeans_on_features(self, source):
        img = self.two_halves()
        labels = discover(img, self.params, 2, self.cfg, source, seed=4)
        assert labels.shape == (8, 8)
        feats = features(self.params, img[None], self.cfg, source)[0]
        np.testing.assert_array_equal(labels, kmeans(feats, 2, seed=4).labels)

    def test_interior_halves_separate(self):
        labels = discover(self.two_halves(), self.params, 2, self.cfg, "hidden")
        left, right = labels[1:7, 1:3], labels[1:7, 5:7]
        assert len(np.unique(left)) == 1 and len(np.unique(right)) == 1
        assert left[0, 0] != right[0, 0]

    def test_deterministic(self):
        img = np.random.default_rng(3).random((32, 32, 3))
        a = discover(img, self.params, 4, self.cfg)
        b = discover(img, self.params, 4, self.cfg)
        np.testing.assert_array_equal(a, b)

    def test_all_cells(self):
        img = np.random.default_rng(4).random((16, 16, 3))
        labels = discover(img, self.params, 16, self.cfg)
        assert len(np.unique(labels)) == 16


class TestPyramid:
    feats = np.random.default_rng(5).normal(size=(16, 16, 8))

    def test_single(self):
        masks = proposal_pyramid(self.feats, [1], (64, 64))
        assert masks.shape == (1, 64, 64) and masks.all()

    def test_full_pyramid_count(self):
        masks = proposal_pyramid(self.feats, [1, 2, 4, 8, 16, 32, 64, 128], (64, 64))
        assert len(masks) == 255

    def test_each_level_partitions(self):
        Ks = [1, 2, 4, 8]
        masks = proposal_pyramid(self.feats, Ks, (40, 48))
        start = 0
        for K in Ks:
            level = masks[start : start + K].astype(int)
            assert (level.sum(0) == 1).all()
            start += K

    def test_upsample_nearest(self):
        labels = np.array([[0, 1], [2, 3]])
        np.testing.assert_array_equal(upsample_labels(labels, (4, 4)), np.kron(labels, np.ones((2, 2), int)))


class TestCache:
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(0))
    img = np.random.default_rng(6).random((32, 32, 3))

    def test_hit_skips_compute(self):
        cache = SegmentationCache()
        a = cache_get_or_compute(cache, "x", self.img, self.params, 4, self.cfg)
        b = cache_get_or_compute(cache, "x", self.img, self.params, 4, self.cfg)
        assert cache.computed == 1
        np.testing.assert_array_equal(a, b)

    def test_bump_forces_recompute(self):
        cache = SegmentationCache()
        cache_get_or_compute(cache, "x", self.img, self.params, 4, self.cfg)
        cache.bump()
        cache_get_or_compute(cache, "x", self.img, self.params, 4, self.cfg)
        assert cache.computed == 2

    def test_stale_stamp_purges(self):
        cache = SegmentationCache()
        cache.get_or_compute("x", lambda: np.zeros((2, 2)), stamp=0)
        cache.get_or_compute("x", lambda: np.ones((2, 2)), stamp=1)
        assert cache.computed == 2 and cache.stamp == 1

    def test_disabled_always_computes(self):
        cache = SegmentationCache(enabled=False)
        for _ in range(3):
            cache_get_or_compute(cache, "x", self.img, self.params, 4, self.cfg)
        assert cache.computed == 3
