"""Training loop: batch sampling, render, loss, scaled backward, RAdam, early stop.

Work inside an iteration is split into fixed-size ray chunks regardless of
thread count; chunk seeds and the gradient merge order depend only on the
chunk index, so results are reproducible for a given config and seed.
"""

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from aquarender import losses
from aquarender.field import (
    GradientBuffer, backward as field_backward, create_field, query, query_sigma,
)
from aquarender.geometry import (
    RayBatch, full_image_pixels, generate_rays, importance_resample, patch_pixels,
    stratified_samples,
)
from aquarender.metrics import psnr
from aquarender.optim import EarlyStopState, RAdam
from aquarender.renderer import RenderSettings, compute_weights, forward, renderer_backward

_CHUNK = 1024


class NumericalError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class TrainConfig:
    renderer: str = "single_surface"
    eta: float = 0.5
    base: float = 0.2
    normalize_weights: bool = False
    robust_enabled: bool = False
    robust_t_r: float = 0.6
    robust_quantile: float = 0.5
    dgs_enabled: bool = False
    dgs_t_h: float = 0.02
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_interval: int = 2000
    n_coarse: int = 64
    n_fine: int = 64
    jitter: bool = True
    resolution: int | tuple = 64
    bounds: tuple = ((-1.05, -1.05, -1.05), (1.05, 1.05, 1.05))
    medium_color: tuple = (0.05, 0.15, 0.20)
    init_density: float = 0.01
    iterations: int = 20000
    batch_rays: int = 4096
    patches: int = 16
    coarse_loss_weight: float = 1.0
    log_every: int = 100
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_run_config(cls, cfg):
        return cls(
            renderer=cfg["renderer"],
            eta=cfg["renderer.eta"],
            base=cfg["renderer.base"],
            normalize_weights=cfg["renderer.normalize_weights"],
            robust_enabled=cfg["robust.enabled"],
            robust_t_r=cfg["robust.t_r"],
            robust_quantile=cfg["robust.quantile"],
            dgs_enabled=cfg["dgs.enabled"],
            dgs_t_h=cfg["dgs.t_h"],
            lr=cfg["optim.lr"],
            beta1=cfg["optim.beta1"],
            beta2=cfg["optim.beta2"],
            eps=cfg["optim.eps"],
            early_stop_interval=cfg["early_stop.interval"],
            n_coarse=cfg["sampling.coarse"],
            n_fine=cfg["sampling.fine"],
            jitter=cfg["sampling.jitter"],
            resolution=cfg["field.resolution"],
            bounds=tuple(cfg["field.bounds"]),
            medium_color=tuple(cfg["field.medium_color"]),
            init_density=cfg["field.init_density"],
            iterations=cfg["train.iterations"],
            batch_rays=cfg["train.batch_rays"],
            patches=cfg["train.patches"],
            coarse_loss_weight=cfg["train.coarse_loss_weight"],
            log_every=cfg["train.log_every"],
            seed=cfg["seed"],
            threads=cfg["threads"],
        )

    def settings(self):
        return RenderSettings(self.renderer, self.eta, self.base, self.normalize_weights)


@dataclass
class TrainLog:
    iterations: list = dc_field(default_factory=list)
    losses: list = dc_field(default_factory=list)
    val_checks: list = dc_field(default_factory=list)   # (iteration, psnr)
    sec_per_100: list = dc_field(default_factory=list)  # (iteration, seconds)
    halted_at: int = None

    def write_csv(self, path):
        val = dict(self.val_checks)
        secs = dict(self.sec_per_100)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "loss", "val_psnr", "sec_per_100"])
            for it, loss in zip(self.iterations, self.losses):
                writer.writerow([
                    it, f"{loss:.8g}",
                    f"{val[it]:.6f}" if it in val else "",
                    f"{secs[it]:.4f}" if it in secs else "",
                ])
        return path


class _RayCache:
    """Precomputed per-frame full-image rays and colors."""

    def __init__(self, dataset):
        h, w = dataset.images.shape[1:3]
        self.h, self.w = h, w
        self.near, self.far = dataset.near, dataset.far
        origins, dirs = [], []
        for cam in dataset.cameras:
            rays = generate_rays(cam, full_image_pixels(cam), dataset.near, dataset.far)
            origins.append(rays.origins)
            dirs.append(rays.directions)
        self.origins = np.stack(origins)      # (F, h*w, 3)
        self.directions = np.stack(dirs)
        self.colors = dataset.images.reshape(dataset.n_frames, h * w, 3)

    def batch(self, frame_ids, flat_pixels):
        n = frame_ids.shape[0]
        rays = RayBatch(
            origins=self.origins[frame_ids, flat_pixels],
            directions=self.directions[frame_ids, flat_pixels],
            t_near=np.full(n, self.near),
            t_far=np.full(n, self.far),
            pixel_ids=np.column_stack(
                [frame_ids, flat_pixels // self.w, flat_pixels % self.w]
            ),
        )
        return rays, self.colors[frame_ids, flat_pixels]


def _chunk_slices(n, size=_CHUNK):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _slice_rays(rays, sl):
    return RayBatch(
        origins=rays.origins[sl], directions=rays.directions[sl],
        t_near=rays.t_near[sl], t_far=rays.t_far[sl], pixel_ids=rays.pixel_ids[sl],
    )


@dataclass
class ChunkRecord:
    """Forward state of one ray chunk: the final render plus the coarse pass."""

    out: object
    profile: object
    samples: object
    field_out: object
    ctx: object
    coarse: object = None          # coarse SampleSet (training mode only)
    coarse_out: object = None      # coarse baseline RenderOutput
    coarse_profile: object = None
    coarse_field_out: object = None
    coarse_ctx: object = None


def render_chunk(fld, rays, settings, n_coarse, n_fine, jitter=False, seed=0,
                 coarse_render=False):
    """Coarse pass, one importance-resampling round on baseline weights, final render.

    With coarse_render=True the coarse pass is itself rendered with the
    baseline renderer (the classic coarse-to-fine scheme trains both passes;
    the coarse loss is what teaches the field opacity when the single-surface
    transform is active on the fine pass).
    """
    coarse = stratified_samples(rays, n_coarse, jitter=jitter, rng_seed=seed)
    if coarse_render:
        ctx_c = []
        coarse_field_out = query(fld, coarse, _ctx_out=ctx_c)
        coarse_out, coarse_profile = forward(coarse, coarse_field_out,
                                             RenderSettings("baseline"))
    else:
        ctx_c = [None]
        coarse_field_out = coarse_out = None
        coarse_profile = compute_weights(coarse, query_sigma(fld, coarse))
    if n_fine > 0:
        union = importance_resample(coarse, coarse_profile.w, n_fine, rng_seed=seed + 1)
    else:
        union = coarse
    ctx_out = []
    field_out = query(fld, union, _ctx_out=ctx_out)
    out, profile = forward(union, field_out, settings)
    return ChunkRecord(
        out=out, profile=profile, samples=union, field_out=field_out, ctx=ctx_out[0],
        coarse=coarse, coarse_out=coarse_out, coarse_profile=coarse_profile,
        coarse_field_out=coarse_field_out, coarse_ctx=ctx_c[0],
    )


def render_view(fld, camera, near, far, settings, n_coarse=64, n_fine=64, chunk=8192):
    """Deterministic full-frame render (midpoint samples, seeded resampling)."""
    pixels = full_image_pixels(camera)
    rays = generate_rays(camera, pixels, near, far)
    rgb = np.empty((len(rays), 3))
    for i, sl in enumerate(_chunk_slices(len(rays), chunk)):
        rec = render_chunk(
            fld, _slice_rays(rays, sl), settings, n_coarse, n_fine, jitter=False, seed=7 * i
        )
        rgb[sl] = rec.out.rgb
    return np.clip(rgb.reshape(camera.height, camera.width, 3), 0.0, 1.0)


def _chunk_seed(seed, iteration, index):
    # stable per (run, iteration, chunk); independent of thread count
    return (seed * 1_000_003 + iteration) * 1_000_003 + index


def train(config, dataset, progress=None):
    """Fit a voxel field to the dataset's train split.

    Returns (field, TrainLog). `progress` (optional callable) receives the
    stdout progress lines instead of print.
    """
    splits = dataset.splits
    if not splits.get("train") or not splits.get("val"):
        raise ValueError("dataset needs nonempty train and val splits")
    emit = progress if progress is not None else print

    cache = _RayCache(dataset)
    h, w = cache.h, cache.w
    train_ids = np.asarray(splits["train"], dtype=np.int64)
    fld = create_field(config.resolution, config.bounds, config.init_density, config.medium_color)
    params = {"density": fld.density_params, "color": fld.color_params}
    opt = RAdam(config.lr, config.beta1, config.beta2, config.eps)
    estop = EarlyStopState(interval=config.early_stop_interval)
    settings = config.settings()
    rng = np.random.default_rng(config.seed)
    log = TrainLog()

    if config.robust_enabled and (h < losses.PATCH_SIZE or w < losses.PATCH_SIZE):
        raise ValueError("robust loss needs images of at least 16x16 pixels")

    def val_psnr():
        vals = []
        for f in splits["val"]:
            pred = render_view(fld, dataset.cameras[f], cache.near, cache.far,
                               settings, config.n_coarse, config.n_fine)
            vals.append(psnr(pred, dataset.images[f]))
        return float(np.mean(vals))

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    coarse_w = config.coarse_loss_weight
    t_mark = time.perf_counter()
    try:
        for it in range(1, config.iterations + 1):
            # --- sample a batch (rays + ground truth) -----------------------
            if config.robust_enabled:
                pf = rng.choice(train_ids, size=config.patches)
                pr = rng.integers(0, h - losses.PATCH_SIZE + 1, size=config.patches)
                pc = rng.integers(0, w - losses.PATCH_SIZE + 1, size=config.patches)
                pix = patch_pixels(np.column_stack([pr, pc]), losses.PATCH_SIZE)
                frame_ids = np.repeat(pf, losses.PATCH_SIZE**2)
                flat = pix[:, 0] * w + pix[:, 1]
                patch_origins = np.column_stack([pf, pr, pc])
            else:
                frame_ids = rng.choice(train_ids, size=config.batch_rays)
                flat = rng.integers(0, h * w, size=config.batch_rays)
                patch_origins = None
            rays, gt = cache.batch(frame_ids, flat)
            n = len(rays)
            chunks = _chunk_slices(n)

            # --- forward ----------------------------------------------------
            def fwd(args):
                idx, sl = args
                return render_chunk(
                    fld, _slice_rays(rays, sl), settings, config.n_coarse, config.n_fine,
                    jitter=config.jitter, seed=_chunk_seed(config.seed, it, idx),
                    coarse_render=coarse_w > 0.0,
                )
            work = list(enumerate(chunks))
            results = list(pool.map(fwd, work)) if pool else [fwd(a) for a in work]

            pred = np.concatenate([r.out.rgb for r in results], axis=0)

            # --- loss ---------------------------------------------------------
            if config.robust_enabled:
                patches = losses.PatchBatch(
                    residual_grid=np.zeros((config.patches, losses.PATCH_SIZE, losses.PATCH_SIZE)),
                    patch_origin=patch_origins,
                )
                loss, d_rgb = losses.robust_loss(
                    pred, gt, patches, t_r=config.robust_t_r, quantile=config.robust_quantile
                )
                inlier = patches.inlier_mask.reshape(-1).astype(float)
            else:
                loss, d_rgb = losses.l2_loss(pred, gt)
                inlier = None
            if coarse_w > 0.0:
                # classic coarse-to-fine: the coarse baseline render carries its
                # own photometric term (the geometry-learning channel when the
                # single-surface transform reshapes the fine pass)
                pred_c = np.concatenate([r.coarse_out.rgb for r in results], axis=0)
                diff_c = pred_c - gt
                if inlier is not None:
                    loss_c = float((inlier * (diff_c * diff_c).sum(axis=1)).sum() / n)
                    d_rgb_c = coarse_w * 2.0 * inlier[:, None] * diff_c / n
                else:
                    loss_c = float((diff_c * diff_c).sum() / n)
                    d_rgb_c = coarse_w * 2.0 * diff_c / n
                loss = loss + coarse_w * loss_c
            if not np.isfinite(loss):
                frames = sorted(set(int(i) for i in frame_ids))
                raise NumericalError(
                    f"non-finite loss at iteration {it} (batch frames {frames})"
                )

            # --- D-GS gate over the whole batch ------------------------------
            scale_by_chunk = [None] * len(chunks)
            scale_coarse_by_chunk = [None] * len(chunks)
            if config.dgs_enabled:
                dists = [
                    np.linalg.norm(r.samples.positions - rays.origins[sl, None, :], axis=-1)
                    for r, sl in zip(results, chunks)
                ]
                d_avg = float(np.mean([d.mean() for d in dists]))
                if d_avg > config.dgs_t_h:
                    scale_by_chunk = [np.minimum(1.0, d * d) for d in dists]
                    if coarse_w > 0.0:
                        scale_coarse_by_chunk = [
                            np.minimum(1.0, np.linalg.norm(
                                r.coarse.positions - rays.origins[sl, None, :], axis=-1) ** 2)
                            for r, sl in zip(results, chunks)
                        ]

            # --- backward -----------------------------------------------------
            def bwd(args):
                idx, sl = args
                rec = results[idx]
                d_sigma, d_c = renderer_backward(
                    rec.samples, rec.field_out, rec.profile, d_rgb[sl],
                    weight_grad_scale=scale_by_chunk[idx],
                )
                buf = GradientBuffer.zeros_like(fld)
                field_backward(fld, rec.samples, d_sigma, d_c, buf, ctx=rec.ctx)
                if coarse_w > 0.0:
                    d_sigma_c, d_c_c = renderer_backward(
                        rec.coarse, rec.coarse_field_out, rec.coarse_profile, d_rgb_c[sl],
                        weight_grad_scale=scale_coarse_by_chunk[idx],
                    )
                    field_backward(fld, rec.coarse, d_sigma_c, d_c_c, buf, ctx=rec.coarse_ctx)
                return buf
            bufs = list(pool.map(bwd, work)) if pool else [bwd(a) for a in work]
            grads = bufs[0]
            for b in bufs[1:]:
                grads.add_(b)

            opt.step(params, {"density": grads.d_density, "color": grads.d_color})

            log.iterations.append(it)
            log.losses.append(loss)
            if it % config.log_every == 0:
                now = time.perf_counter()
                log.sec_per_100.append((it, (now - t_mark) * 100.0 / config.log_every))
                t_mark = now
                emit(f"[train] iter {it}/{config.iterations} loss {loss:.6f}")

            if config.early_stop_interval > 0 and it % config.early_stop_interval == 0:
                v = val_psnr()
                log.val_checks.append((it, v))
                emit(f"[train] iter {it} val_psnr {v:.3f} dB")
                if estop.check(it, v, params):
                    log.halted_at = it
                    emit(f"[train] early stop at iteration {it}; "
                         f"restoring best checkpoint from iteration {estop.best_iteration}")
                    break
    finally:
        if pool:
            pool.shutdown()

    if log.halted_at is not None:
        fld.density_params[...] = estop.best_params["density"]
        fld.color_params[...] = estop.best_params["color"]
    elif estop.best_params is not None and config.iterations % config.early_stop_interval != 0:
        # training ran past the last check: keep whichever state scores best
        final = val_psnr()
        log.val_checks.append((config.iterations, final))
        if final < estop.best_psnr:
            fld.density_params[...] = estop.best_params["density"]
            fld.color_params[...] = estop.best_params["color"]
    return fld, log
