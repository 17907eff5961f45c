"""Photometric losses, the patch-based outlier mask, and depth-based gradient scaling."""

from dataclasses import dataclass

import numpy as np

PATCH_SIZE = 16
BLOCK_SIZE = 8


@dataclass
class PatchBatch:
    """Residual grids for a batch of 16x16 pixel patches.

    residual_grid: (p, 16, 16) per-pixel squared L2 color residuals.
    inlier_mask:   (p, 16, 16) bool, filled by robust_mask.
    patch_origin:  (p, 3) int (image, row, col) of each patch's top-left pixel.
    """

    residual_grid: np.ndarray
    patch_origin: np.ndarray
    inlier_mask: np.ndarray = None


@dataclass
class DgsConfig:
    enabled: bool = False
    t_h: float = 0.02
    camera_origin: np.ndarray = None  # (3,) or (n_rays, 3); defaults to each ray's origin

    def validate(self):
        if self.t_h <= 0:
            raise ValueError("dgs threshold t_h must be positive")
        return self


def l2_loss(pred, gt):
    """Mean over rays of the squared L2 color error; returns (loss, d_pred)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    n = pred.reshape(-1, pred.shape[-1]).shape[0]
    diff = pred - gt
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


def _box_blur3(grid):
    """3x3 box filter with edge-replicate padding, over the last two axes."""
    p = np.pad(grid, [(0, 0)] * (grid.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    out = np.zeros_like(grid, dtype=float)
    for dr in range(3):
        for dc in range(3):
            out += p[..., dr:dr + grid.shape[-2], dc:dc + grid.shape[-1]]
    return out / 9.0


def robust_mask(patches, t_r=0.6, quantile=0.5):
    """Per-pixel inlier weights in {0, 1} for a batch of residual patches.

    Pipeline: (1) 3x3 box blur of the residual grids; (2) pixel labels: 1 iff
    the blurred residual is <= the `quantile` percentile of all blurred
    residuals in the batch (ties count as inliers); (3) each 8x8 block is an
    inlier iff the mean pixel label over a 16x16 window centered on the block
    (clipped to the patch) is >= t_r; (4) every pixel inherits its block's
    label. Fills patches.inlier_mask and returns it as float weights.
    """
    grids = np.asarray(patches.residual_grid, dtype=float)
    if grids.ndim != 3 or grids.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"residual grids must be (p, 16, 16), got {grids.shape}")
    if np.any(grids < 0):
        raise ValueError("residuals must be nonnegative")
    blurred = _box_blur3(grids)
    thresh = np.percentile(blurred, quantile * 100.0)
    labels = (blurred <= thresh).astype(float)

    weights = np.zeros_like(labels)
    ext = (PATCH_SIZE - BLOCK_SIZE) // 2  # grow each 8x8 block to a 16x16 window
    for br in (0, BLOCK_SIZE):
        for bc in (0, BLOCK_SIZE):
            r0, r1 = max(0, br - ext), min(PATCH_SIZE, br + BLOCK_SIZE + ext)
            c0, c1 = max(0, bc - ext), min(PATCH_SIZE, bc + BLOCK_SIZE + ext)
            block_mean = labels[:, r0:r1, c0:c1].mean(axis=(1, 2))  # (p,)
            block_label = (block_mean >= t_r).astype(float)
            weights[:, br:br + BLOCK_SIZE, bc:bc + BLOCK_SIZE] = block_label[:, None, None]

    patches.inlier_mask = weights.astype(bool)
    return weights


def robust_loss(pred, gt, patches, t_r=0.6, quantile=0.5):
    """IRLS-reweighted L2 loss over patch-sampled rays.

    pred/gt are (p*256, 3) patch-major, row-major within each patch. The
    inlier mask is computed from the current residuals and treated as a
    constant: gradients flow only through the L2 term of inlier rays.
    """
    if patches is None:
        raise ValueError("robust loss requires patch-based ray sampling")
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    n_patches = patches.residual_grid.shape[0]
    n = n_patches * PATCH_SIZE * PATCH_SIZE
    if pred.reshape(-1, 3).shape[0] != n:
        raise ValueError(f"expected {n} rays for {n_patches} patches, got {pred.reshape(-1, 3).shape[0]}")

    diff = pred.reshape(-1, 3) - gt.reshape(-1, 3)
    residual = np.sum(diff * diff, axis=-1)
    patches.residual_grid = residual.reshape(n_patches, PATCH_SIZE, PATCH_SIZE)
    weights = robust_mask(patches, t_r=t_r, quantile=quantile).reshape(-1)

    loss = float(np.sum(weights * residual) / n)
    d_pred = (2.0 / n) * weights[:, None] * diff
    return loss, d_pred.reshape(pred.shape)


def dgs_scale(samples, cfg):
    """Per-sample gradient multipliers for depth-based gradient scaling.

    D_avg = mean distance from camera over all samples in the batch. When
    D_avg exceeds t_h, sample i gets min(1, dist_i^2); otherwise all ones.
    """
    cfg.validate()
    if not cfg.enabled:
        return np.ones_like(samples.t)
    if cfg.camera_origin is not None:
        origin = np.asarray(cfg.camera_origin, dtype=float)
        if origin.ndim == 1:
            origin = origin[None, None, :]
        else:
            origin = origin[:, None, :]
    else:
        origin = samples.rays.origins[:, None, :]
    dist = np.linalg.norm(samples.positions - origin, axis=-1)  # (R, S)
    d_avg = float(dist.mean())
    if d_avg <= cfg.t_h:
        return np.ones_like(dist)
    return np.minimum(1.0, dist * dist)


def mask_to_image(weights):
    """Grayscale u8 visualization of per-pixel inlier weights."""
    w = np.asarray(weights, dtype=float)
    return np.clip(np.rint(w * 255.0), 0, 255).astype(np.uint8)
