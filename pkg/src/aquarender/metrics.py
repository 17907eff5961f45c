"""PSNR / SSIM image metrics, masked evaluation, and report generation."""

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_WIN = 11
_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def psnr(pred, gt, mask=None):
    """10 log10(1 / MSE) over unmasked pixels, for images in [0, 1].

    Exact match returns inf. mask: (h, w) bool, True = evaluate.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    err = (pred - gt) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("mask selects no pixels")
        err = err[mask]
    mse = float(np.mean(err))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel():
    r = np.arange(_WIN) - (_WIN - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * _SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _filt(img):
    # valid-region Gaussian filtering: output (h-10, w-10)
    out = ndimage.correlate(img, _KERNEL, mode="constant")
    half = _WIN // 2
    return out[half:-half, half:-half]


def ssim(pred, gt, mask=None):
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5 on [0, 1] images.

    Window statistics are computed on the valid interior; mask (if given)
    restricts which window centers are averaged. Channel-averaged for RGB.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    h, w = pred.shape[:2]
    if h < _WIN or w < _WIN:
        raise ValueError(f"image {w}x{h} smaller than the {_WIN}x{_WIN} SSIM window")
    half = _WIN // 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        centers = mask[half:-half, half:-half]
        if not centers.any():
            raise ValueError("mask selects no SSIM window centers")
    else:
        centers = None

    vals = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], gt[..., c]
        mx, my = _filt(x), _filt(y)
        sxx = _filt(x * x) - mx * mx
        syy = _filt(y * y) - my * my
        sxy = _filt(x * y) - mx * my
        num = (2 * mx * my + _C1) * (2 * sxy + _C2)
        den = (mx * mx + my * my + _C1) * (sxx + syy + _C2)
        smap = num / den
        vals.append(float(smap[centers].mean() if centers is not None else smap.mean()))
    return float(np.mean(vals))


def mismatch_clusters(pred, gt, color_threshold=0.2):
    """Sizes (in pixels) of 4-connected clusters where any channel deviates
    by more than color_threshold."""
    bad = np.any(np.abs(np.asarray(pred) - np.asarray(gt)) > color_threshold, axis=-1)
    labels, n = ndimage.label(bad)
    if n == 0:
        return []
    return sorted(np.bincount(labels.ravel())[1:].tolist(), reverse=True)


@dataclass
class MetricReport:
    renderer: str
    fingerprint: str
    rows: list = field(default_factory=list)  # per-frame dicts
    summary: dict = None

    def finalize(self):
        if not self.rows:
            raise ValueError("no frames evaluated")
        self.summary = {
            "frame_id": "mean",
            "renderer": self.renderer,
            "psnr_full": float(np.mean([r["psnr_full"] for r in self.rows])),
            "psnr_static": float(np.mean([r["psnr_static"] for r in self.rows])),
            "ssim_full": float(np.mean([r["ssim_full"] for r in self.rows])),
            "ssim_static": float(np.mean([r["ssim_static"] for r in self.rows])),
        }
        return self

    def write_csv(self, path):
        fields = ["frame_id", "renderer", "psnr_full", "psnr_static", "ssim_full", "ssim_static"]
        with open(path, "w", newline="") as f:
            f.write(f"# config_fingerprint: {self.fingerprint}\n")
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for row in self.rows + [self.summary]:
                writer.writerow({k: _fmt(row[k]) for k in fields})
        return path


def _fmt(v):
    if isinstance(v, float):
        return "inf" if np.isinf(v) else f"{v:.6f}"
    return v


def config_fingerprint(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]


def evaluate_run(render_frame, dataset, renderer_name, config=None, split="test", csv_path=None):
    """Render the split's frames with `render_frame(frame_index) -> image` and
    score them against the dataset, full-frame and static-masked.

    Returns a finalized MetricReport (one row per frame plus a summary row).
    """
    frames = dataset.frames(split)
    if not frames:
        raise ValueError(f"dataset has no {split!r} frames")
    report = MetricReport(renderer=renderer_name, fingerprint=config_fingerprint(config or {}))
    for f in frames:
        pred = render_frame(f)
        gt = dataset.images[f]
        mask = dataset.masks[f]
        report.rows.append({
            "frame_id": f,
            "renderer": renderer_name,
            "psnr_full": psnr(pred, gt),
            "psnr_static": psnr(pred, gt, mask),
            "ssim_full": ssim(pred, gt),
            "ssim_static": ssim(pred, gt, mask),
        })
    report.finalize()
    if csv_path is not None:
        report.write_csv(csv_path)
    return report
