import numpy as np
import pytest

from aquarender.geometry import RayBatch, SampleSet
from aquarender.losses import (
    DgsConfig, PatchBatch, dgs_scale, l2_loss, mask_to_image, robust_loss, robust_mask,
)


def reference_robust_mask(grids, t_r=0.6, quantile=0.5):
    """Loop re-derivation of the 4-step masking pipeline (independent oracle)."""
    grids = np.asarray(grids, dtype=float)
    p, H, W = grids.shape
    blurred = np.zeros_like(grids)
    for g in range(p):
        for r in range(H):
            for c in range(W):
                acc = 0.0
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr = min(max(r + dr, 0), H - 1)  # edge replicate
                        cc = min(max(c + dc, 0), W - 1)
                        acc += grids[g, rr, cc]
                blurred[g, r, c] = acc / 9.0
    thresh = np.percentile(blurred, quantile * 100.0)
    labels = (blurred <= thresh).astype(float)
    out = np.zeros_like(labels)
    for g in range(p):
        for br in (0, 8):
            for bc in (0, 8):
                r0, r1 = max(0, br - 4), min(H, br + 12)
                c0, c1 = max(0, bc - 4), min(W, bc + 12)
                mean = labels[g, r0:r1, c0:c1].mean()
                out[g, br:br + 8, bc:bc + 8] = 1.0 if mean >= t_r else 0.0
    return out


def sample_set_at_distances(dists, origin=(0.0, 0.0, 0.0)):
    """One ray along +z with samples at the requested distances from origin."""
    t = np.atleast_2d(np.asarray(dists, dtype=float))
    rays = RayBatch(
        origins=np.tile(np.asarray(origin, dtype=float), (t.shape[0], 1)),
        directions=np.tile([0.0, 0.0, 1.0], (t.shape[0], 1)),
        t_near=np.full(t.shape[0], max(t.min() / 2, 1e-6)),
        t_far=np.full(t.shape[0], t.max() + 1.0),
        pixel_ids=np.zeros((t.shape[0], 3), dtype=np.int64),
    )
    positions = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return SampleSet(t=t, delta=np.ones_like(t), positions=positions, rays=rays)


class TestL2Loss:
    def test_exact_match(self):
        x = np.random.default_rng(0).uniform(size=(10, 3))
        loss, grad = l2_loss(x, x)
        assert loss == 0.0
        assert not grad.any()

    def test_single_ray_formula(self):
        loss, grad = l2_loss(np.array([[0.6, 0.2, 0.2]]), np.array([[0.5, 0.2, 0.2]]))
        assert loss == pytest.approx(0.01, abs=1e-15)
        np.testing.assert_allclose(grad, [[0.2, 0.0, 0.0]], atol=1e-15)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        pred, gt = rng.uniform(size=(30, 3)), rng.uniform(size=(30, 3))
        perm = rng.permutation(30)
        assert l2_loss(pred, gt)[0] == pytest.approx(l2_loss(pred[perm], gt[perm])[0], rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            l2_loss(np.zeros((3, 3)), np.zeros((4, 3)))


class TestRobustMask:
    def test_uniform_residuals_all_inlier(self):
        patches = PatchBatch(np.full((2, 16, 16), 0.25), np.zeros((2, 3), np.int64))
        w = robust_mask(patches)
        assert w.min() == 1.0

    def test_hot_quadrant_masked_exactly(self):
        grid = np.ones((1, 16, 16))
        grid[0, :8, :8] = 100.0
        patches = PatchBatch(grid, np.zeros((1, 3), np.int64))
        w = robust_mask(patches)
        assert not w[0, :8, :8].any()       # hot quadrant out
        assert w[0, :8, 8:].all() and w[0, 8:, :8].all() and w[0, 8:, 8:].all()
        np.testing.assert_array_equal(w, reference_robust_mask(grid))

    def test_matches_reference_on_random_batches(self):
        rng = np.random.default_rng(2)
        for _ in range(3):
            grids = rng.uniform(0, 1, size=(3, 16, 16)) ** 2
            patches = PatchBatch(grids, np.zeros((3, 3), np.int64))
            np.testing.assert_array_equal(robust_mask(patches), reference_robust_mask(grids))

    def test_idempotent_on_consistent_residuals(self):
        grid = np.ones((1, 16, 16))
        grid[0, :8, :8] = 50.0
        patches = PatchBatch(grid.copy(), np.zeros((1, 3), np.int64))
        m1 = robust_mask(patches)
        m2 = robust_mask(PatchBatch(grid.copy(), np.zeros((1, 3), np.int64)))
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(m2, reference_robust_mask(grid))

    def test_wrong_grid_size_rejected(self):
        with pytest.raises(ValueError, match="16"):
            robust_mask(PatchBatch(np.ones((1, 8, 8)), np.zeros((1, 3), np.int64)))

    def test_mask_visualization(self):
        img = mask_to_image(np.array([[0.0, 1.0]]))
        np.testing.assert_array_equal(img, [[0, 255]])


class TestRobustLoss:
    def _patch_data(self, rng, n_patches=2):
        gt = rng.uniform(0.2, 0.8, size=(n_patches * 256, 3))
        return gt

    def test_all_inlier_equals_l2(self):
        rng = np.random.default_rng(3)
        # dyadic values make the residual exactly uniform; ties go to inlier
        gt = rng.integers(0, 128, size=(512, 3)).astype(float) / 256.0
        pred = gt + 0.125
        patches = PatchBatch(np.zeros((2, 16, 16)), np.zeros((2, 3), np.int64))
        loss_r, grad_r = robust_loss(pred, gt, patches)
        loss_l, grad_l = l2_loss(pred, gt)
        assert patches.inlier_mask.all()
        assert loss_r == pytest.approx(loss_l, abs=1e-12)
        np.testing.assert_allclose(grad_r, grad_l, atol=1e-15)

    def test_all_outlier_zero_loss_and_gradient(self):
        # checkerboard residuals: labels scatter spatially, no 16x16 window
        # reaches 60% inliers, so every block is masked out
        rng = np.random.default_rng(4)
        gt = self._patch_data(rng, n_patches=1)
        rr, cc = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        checker = ((rr + cc) % 2).astype(float).reshape(-1)
        pred = gt + np.sqrt(0.05 + 0.4 * checker)[:, None] / np.sqrt(3.0)
        patches = PatchBatch(np.zeros((1, 16, 16)), np.zeros((1, 3), np.int64))
        loss, grad = robust_loss(pred, gt, patches)
        assert not patches.inlier_mask.any()
        assert loss == 0.0
        assert not grad.any()

    def test_half_masked_batch(self):
        rng = np.random.default_rng(5)
        gt = self._patch_data(rng)
        pred = gt.copy()
        pred[:256] += 0.3   # patch 0 hot everywhere -> masked out
        pred[256:] += 0.01  # patch 1 uniform small -> kept
        patches = PatchBatch(np.zeros((2, 16, 16)), np.zeros((2, 3), np.int64))
        loss, grad = robust_loss(pred, gt, patches)
        residual = ((pred - gt) ** 2).sum(axis=1)
        expected = residual[256:].sum() / 512.0  # masked mean over the full ray count
        assert loss == pytest.approx(expected, rel=1e-12)
        assert not grad[:256].any()
        assert np.abs(grad[256:]).min() > 0

    def test_requires_patches(self):
        with pytest.raises(ValueError, match="patch"):
            robust_loss(np.zeros((4, 3)), np.zeros((4, 3)), None)

    def test_robust_never_exceeds_l2(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            gt = self._patch_data(rng)
            pred = gt + rng.normal(0, 0.2, size=gt.shape)
            patches = PatchBatch(np.zeros((2, 16, 16)), np.zeros((2, 3), np.int64))
            assert robust_loss(pred, gt, patches)[0] <= l2_loss(pred, gt)[0] + 1e-15

    def test_gradient_is_masked_l2_gradient(self):
        # finite differences against the masked L2 with the mask held frozen
        rng = np.random.default_rng(7)
        gt = self._patch_data(rng, n_patches=1)
        pred = gt + rng.normal(0, 0.1, size=gt.shape)
        patches = PatchBatch(np.zeros((1, 16, 16)), np.zeros((1, 3), np.int64))
        _, grad = robust_loss(pred, gt, patches)
        frozen = patches.inlier_mask.reshape(-1).astype(float)

        def frozen_loss(p):
            r = ((p - gt) ** 2).sum(axis=1)
            return float((frozen * r).sum() / len(r))

        h = 1e-6
        for i in rng.choice(256, size=12, replace=False):
            for c in range(3):
                p2 = pred.copy()
                p2[i, c] += h
                lp = frozen_loss(p2)
                p2[i, c] -= 2 * h
                lm = frozen_loss(p2)
                fd = (lp - lm) / (2 * h)
                assert abs(fd - grad[i, c]) <= 1e-6 * max(1.0, abs(fd))


class TestDgsScale:
    def test_multiplier_table(self):
        s = sample_set_at_distances([0.1, 1.0, 2.0])
        mult = dgs_scale(s, DgsConfig(enabled=True, camera_origin=np.zeros(3)))
        np.testing.assert_allclose(mult[0], [0.01, 1.0, 1.0], atol=1e-12)

    def test_gate_closed_when_shallow(self):
        s = sample_set_at_distances([0.005, 0.01, 0.015])
        mult = dgs_scale(s, DgsConfig(enabled=True))
        np.testing.assert_array_equal(mult, 1.0)

    def test_disabled_returns_ones(self):
        s = sample_set_at_distances([0.1, 5.0])
        np.testing.assert_array_equal(dgs_scale(s, DgsConfig(enabled=False)), 1.0)

    def test_defaults_to_ray_origins(self):
        s = sample_set_at_distances([0.5, 1.5], origin=(1.0, 2.0, 3.0))
        mult = dgs_scale(s, DgsConfig(enabled=True))
        np.testing.assert_allclose(mult[0], [0.25, 1.0], atol=1e-12)

    def test_multipliers_monotone_and_bounded(self):
        rng = np.random.default_rng(8)
        d = np.sort(rng.uniform(0.05, 3.0, size=32))
        mult = dgs_scale(sample_set_at_distances(d), DgsConfig(enabled=True))[0]
        assert np.all(mult > 0) and np.all(mult <= 1.0)
        assert np.all(np.diff(mult) >= -1e-15)

    def test_invalid_threshold_rejected(self):
        with pytest.raises(ValueError, match="t_h"):
            dgs_scale(sample_set_at_distances([1.0]), DgsConfig(enabled=True, t_h=0.0))
