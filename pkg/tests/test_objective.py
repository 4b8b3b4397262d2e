import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import contrastive_loss_reference

from odin import autodiff as ad
from odin.model import ModelConfig, as_leaves, init_params
from odin.objective import (
    DegenerateBatch,
    InvalidSegment,
    contrastive_loss,
    forward_view,
    mask_pool,
    pool_masks,
    similarity,
)


def loss_value(q1, q2, z1, z2, valid, alpha=0.1):
    return contrastive_loss((ad.leaf(q1), ad.leaf(q2)), (z1, z2), valid, alpha).data.item()


def reference(q1, q2, z1, z2, valid, alpha=0.1):
    return contrastive_loss_reference(q1.tolist(), q2.tolist(), z1.tolist(), z2.tolist(), valid.tolist(), alpha)


def random_batch(rng, n=3, k=4, d=5, p_valid=0.7):
    arrays = [rng.normal(size=(n, k, d)) for _ in range(4)]
    valid = rng.random((n, k)) < p_valid
    valid[0, 0] = True
    return (*arrays, valid)


class TestMaskPool:
    def test_mean_over_cells(self):
        fm = np.arange(12, dtype=float).reshape(2, 2, 3)
        mask = np.array([[1, 0], [0, 1]])
        np.testing.assert_allclose(mask_pool(fm, mask).data, (fm[0, 0] + fm[1, 1]) / 2)

    def test_full_mask_is_global_mean(self):
        fm = np.random.default_rng(0).normal(size=(4, 3, 2))
        np.testing.assert_allclose(mask_pool(fm, np.ones((4, 3))).data, fm.mean((0, 1)))

    def test_empty_mask(self):
        with pytest.raises(InvalidSegment):
            mask_pool(np.zeros((2, 2, 3)), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            mask_pool(np.zeros((2, 2, 3)), np.ones((3, 2)))

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        fm = rng.normal(size=(2, 4, 4, 3))
        masks = rng.random((2, 3, 4, 4)) < 0.4
        masks[1, 2] = False
        pooled, valid = pool_masks(fm, masks)
        assert valid.tolist() == [[m.any() for m in row] for row in masks]
        for n in range(2):
            for k in range(3):
                if valid[n, k]:
                    np.testing.assert_allclose(pooled.data[n, k], mask_pool(fm[n], masks[n, k]).data)


class TestSimilarity:
    def test_examples(self):
        assert similarity([1.0, 0.0], [2.0, 0.0], 0.1) == pytest.approx(10.0)
        assert similarity([1.0, 0.0], [0.0, 3.0], 0.1) == pytest.approx(0.0)
        assert similarity([1.0, 1.0], [-1.0, -1.0], 0.5) == pytest.approx(-2.0)

    def test_alpha_positive(self):
        with pytest.raises(ValueError):
            similarity([1.0], [1.0], 0.0)


class TestLoss:
    def test_single_segment_is_zero(self):
        rng = np.random.default_rng(0)
        q1, q2, z1, z2 = (rng.normal(size=(2, 2, 4)) for _ in range(4))
        valid = np.array([[True, False], [False, False]])
        assert loss_value(q1, q2, z1, z2, valid) == pytest.approx(0.0, abs=1e-12)

    def test_indistinguishable_negative_gives_log2(self):
        v = np.ones((1, 2, 3))
        valid = np.ones((1, 2), bool)
        # two anchors, two directions, divided by two segments
        assert loss_value(v, v, v, v, valid) == pytest.approx(2 * math.log(2))

    def test_perfect_separation_approaches_zero(self):
        eye = np.eye(3)[None]
        valid = np.ones((1, 3), bool)
        value = loss_value(eye, eye, eye, eye, valid, alpha=0.01)
        assert 0.0 <= value < 1e-30

    def test_degenerate_batch(self):
        z = np.zeros((1, 2, 3))
        with pytest.raises(DegenerateBatch):
            loss_value(z, z, z, z, np.zeros((1, 2), bool))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), alpha=st.sampled_from([0.1, 0.5, 1.0]))
    def test_matches_reference(self, seed, alpha):
        q1, q2, z1, z2, valid = random_batch(np.random.default_rng(seed))
        assert loss_value(q1, q2, z1, z2, valid, alpha) == pytest.approx(reference(q1, q2, z1, z2, valid, alpha), rel=1e-10)

    def test_invalid_entries_ignored(self):
        q1, q2, z1, z2, valid = random_batch(np.random.default_rng(3))
        base = loss_value(q1, q2, z1, z2, valid)
        junk = [a.copy() for a in (q1, q2, z1, z2)]
        for a in junk:
            a[~valid] = 1e3
        assert loss_value(*junk, valid) == pytest.approx(base, rel=1e-12)

    def test_segment_permutation_and_scale_invariance(self):
        rng = np.random.default_rng(4)
        q1, q2, z1, z2, valid = random_batch(rng)
        base = loss_value(q1, q2, z1, z2, valid)
        perm = rng.permutation(4)
        permuted = [a[:, perm] for a in (q1, q2, z1, z2)]
        assert loss_value(*permuted, valid[:, perm]) == pytest.approx(base, rel=1e-12)
        scaled = [a * s for a, s in zip((q1, q2, z1, z2), (3.0, 0.5, 7.0, 2.0))]
        assert loss_value(*scaled, valid) == pytest.approx(base, rel=1e-12)

    def test_duplicate_negative_raises_loss(self):
        rng = np.random.default_rng(5)
        q1, q2, z1, z2, valid = random_batch(rng, n=1, k=3, p_valid=1.1)
        base = loss_value(q1, q2, z1, z2, valid)
        pad = lambda a: np.concatenate([a, a[:, 2:3]], axis=1)  # noqa: E731
        extra = loss_value(pad(q1), pad(q2), pad(z1), pad(z2), np.ones((1, 4), bool))
        assert extra != pytest.approx(base)
        assert extra == pytest.approx(reference(pad(q1), pad(q2), pad(z1), pad(z2), np.ones((1, 4), bool)))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(6)
        q1, q2, z1, z2, valid = random_batch(rng, n=2, k=3, d=4)
        l1, l2 = ad.leaf(q1), ad.leaf(q2)
        grads = ad.backward(contrastive_loss((l1, l2), (z1, z2), valid, 0.3))
        eps = 1e-6
        numeric = np.zeros_like(q1)
        for idx in np.ndindex(q1.shape):
            up, dn = q1.copy(), q1.copy()
            up[idx] += eps
            dn[idx] -= eps
            numeric[idx] = (reference(up, q2, z1, z2, valid, 0.3) - reference(dn, q2, z1, z2, valid, 0.3)) / (2 * eps)
        np.testing.assert_allclose(grads[l1], numeric, atol=1e-7)


class TestForwardView:
    cfg = ModelConfig()

    def setup_method(self):
        self.params = init_params(self.cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        self.images = rng.random((2, 32, 32, 3))
        grid = self.cfg.grid((32, 32))
        labels = rng.integers(0, 3, size=(2, *grid))
        self.masks = labels[:, None] == np.arange(3)[None, :, None, None]

    def test_shapes(self):
        out = forward_view(self.images, self.params, self.masks, self.cfg)
        assert out.hidden.shape == (2, 3, self.cfg.feature_dim)
        assert out.projection.shape == (2, 3, self.cfg.proj_dim)
        assert out.prediction.shape == (2, 3, self.cfg.proj_dim)
        assert forward_view(self.images, self.params, self.masks, self.cfg, online=False).prediction is None

    def test_grid_mismatch(self):
        with pytest.raises(ad.ShapeError):
            forward_view(self.images, self.params, self.masks[..., :-1], self.cfg)

    def test_target_path_is_stop_gradient(self):
        online = as_leaves(self.params)
        target = as_leaves(self.params)
        a = forward_view(self.images, online, self.masks, self.cfg)
        b = forward_view(self.images, target, self.masks, self.cfg, online=False)
        assert not b.projection.requires_grad
        loss = contrastive_loss((a.prediction, a.prediction), (b.projection, b.projection), a.valid & b.valid)
        grads = ad.backward(loss)
        assert all(online[k] in grads for k in online)
        assert not any(target[k] in grads for k in target)
