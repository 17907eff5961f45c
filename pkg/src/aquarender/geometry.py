"""Pinhole cameras, ray generation, and sample placement along rays."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    """Pinhole camera with a rigid camera-to-world pose.

    Camera frame: +x right, +y down (image rows grow downward), +z forward.
    `rotation` maps camera-frame vectors to world frame; `position` is the
    camera center in world units.
    """

    rotation: np.ndarray  # (3, 3) orthonormal
    position: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3) or not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation must be orthonormal (R^T R = I within 1e-9)")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        return self

    @classmethod
    def identity(cls, width=2, height=2, focal=1.0):
        cx, cy = width / 2.0, height / 2.0
        return cls(np.eye(3), np.zeros(3), focal, focal, cx, cy, width, height)

    @classmethod
    def look_at(cls, position, target, up=(0.0, 1.0, 0.0), fov_deg=60.0, width=64, height=64):
        """Build a camera at `position` looking at `target`, horizontal FOV in degrees."""
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise ValueError("camera position and target coincide")
        forward = forward / norm
        right = np.cross(forward, np.asarray(up, dtype=float))
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            raise ValueError("up vector is parallel to the view direction")
        right = right / rnorm
        down = np.cross(forward, right)  # y-down camera frame
        rotation = np.stack([right, down, forward], axis=1)
        fx = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
        return cls(rotation, position, fx, fx, width / 2.0, height / 2.0, width, height)

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "position": self.position.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["rotation"], dtype=float), np.asarray(d["position"], dtype=float),
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


@dataclass
class RayBatch:
    """Packed camera rays. Directions are unit length; 0 <= t_near < t_far."""

    origins: np.ndarray     # (n, 3)
    directions: np.ndarray  # (n, 3) unit
    t_near: np.ndarray      # (n,)
    t_far: np.ndarray       # (n,)
    pixel_ids: np.ndarray   # (n, 3) int: (image index, row, col)

    def __len__(self):
        return self.origins.shape[0]

    def validate(self):
        norms = np.linalg.norm(self.directions, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("ray directions must be unit length")
        if np.any(self.t_near < 0) or np.any(self.t_near >= self.t_far):
            raise ValueError("ray bounds must satisfy 0 <= t_near < t_far")
        return self


@dataclass
class SampleSet:
    """Ordered samples along each ray of a RayBatch.

    t is strictly increasing per ray; delta_i are interval lengths with
    sum(delta) = t_far - t_near; positions_i = origin + t_i * direction.
    """

    t: np.ndarray          # (n_rays, n_samples)
    delta: np.ndarray      # (n_rays, n_samples)
    positions: np.ndarray  # (n_rays, n_samples, 3)
    rays: RayBatch = field(repr=False, default=None)

    @property
    def n_samples(self):
        return self.t.shape[1]


def full_image_pixels(camera):
    """All (row, col) pixel coordinates of the camera, row-major."""
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=-1)


def patch_pixels(origins, size):
    """(row, col) coordinates of square patches given their top-left origins.

    origins: (p, 2) int array. Returns (p * size * size, 2), patch-major and
    row-major within each patch.
    """
    origins = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
    dr, dc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    offs = np.stack([dr.ravel(), dc.ravel()], axis=-1)  # (size*size, 2)
    return (origins[:, None, :] + offs[None, :, :]).reshape(-1, 2)


def random_pixels(camera, n, rng_seed):
    """n pixels drawn uniformly (with replacement) from the image."""
    rng = np.random.default_rng(rng_seed)
    rows = rng.integers(0, camera.height, size=n)
    cols = rng.integers(0, camera.width, size=n)
    return np.stack([rows, cols], axis=-1)


def generate_rays(camera, pixels, t_near, t_far, image_index=0, jitter=False, rng_seed=None):
    """One world-space ray per selected pixel, through the pixel center.

    pixels: (n, 2) int array of (row, col). With jitter=True the in-pixel
    offset is drawn uniformly from the pixel footprint instead of 0.5
    (reproducible for a fixed rng_seed). Out-of-bounds pixels are rejected.
    """
    camera.validate()
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    bad = np.where(
        (pixels[:, 0] < 0) | (pixels[:, 0] >= camera.height)
        | (pixels[:, 1] < 0) | (pixels[:, 1] >= camera.width)
    )[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"pixel index {i} out of bounds: (row, col)={tuple(pixels[i])} "
            f"for a {camera.width}x{camera.height} image"
        )
    n = pixels.shape[0]
    if jitter:
        rng = np.random.default_rng(rng_seed)
        off = rng.uniform(0.0, 1.0, size=(n, 2))
    else:
        off = np.full((n, 2), 0.5)
    u = pixels[:, 1] + off[:, 1]  # image x
    v = pixels[:, 0] + off[:, 0]  # image y
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones(n)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, (n, 3)).copy()
    ids = np.column_stack([np.full(n, image_index, dtype=np.int64), pixels])
    return RayBatch(
        origins=origins,
        directions=d_world,
        t_near=np.full(n, float(t_near)),
        t_far=np.full(n, float(t_far)),
        pixel_ids=ids,
    ).validate()


def stratified_samples(rays, n, jitter=False, rng_seed=None):
    """n stratified samples per ray: one per equal-width bin of [t_near, t_far].

    Without jitter samples sit at bin midpoints; with jitter they are drawn
    uniformly inside each bin. delta_i is the bin width.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    span = rays.t_far - rays.t_near
    if np.any(span <= 0):
        raise ValueError("degenerate ray bounds: t_near must be < t_far")
    n_rays = len(rays)
    width = span / n  # (n_rays,)
    if jitter:
        rng = np.random.default_rng(rng_seed)
        frac = rng.uniform(0.0, 1.0, size=(n_rays, n))
    else:
        frac = np.full((n_rays, n), 0.5)
    t = rays.t_near[:, None] + (np.arange(n)[None, :] + frac) * width[:, None]
    delta = np.broadcast_to(width[:, None], (n_rays, n)).copy()
    positions = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return SampleSet(t=t, delta=delta, positions=positions, rays=rays)


def _interval_edges(t, t_near, t_far):
    """Bin edges per ray: [t_near, midpoints of consecutive samples, t_far]."""
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    return np.concatenate([t_near[:, None], mids, t_far[:, None]], axis=1)


def importance_resample(coarse, weights, n_fine, rng_seed=None):
    """Draw n_fine extra samples per ray by inverse-CDF over the coarse bins.

    The piecewise-constant PDF is proportional to weights + 1e-5 (so all-zero
    weights degrade to uniform sampling). Returns the sorted union of coarse
    and fine samples with deltas recomputed from the union's interval edges,
    preserving sum(delta) = t_far - t_near.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != coarse.t.shape:
        raise ValueError(
            f"weights shape {weights.shape} does not match coarse samples {coarse.t.shape}"
        )
    if np.any(weights < 0):
        raise ValueError("importance weights must be nonnegative")
    rays = coarse.rays
    edges = _interval_edges(coarse.t, rays.t_near, rays.t_far)  # (R, n+1)

    if n_fine > 0:
        pdf = weights + 1e-5
        pdf = pdf / pdf.sum(axis=1, keepdims=True)
        cdf = np.concatenate([np.zeros((pdf.shape[0], 1)), np.cumsum(pdf, axis=1)], axis=1)
        cdf[:, -1] = 1.0  # guard roundoff so searchsorted never overflows
        rng = np.random.default_rng(rng_seed)
        u = rng.uniform(0.0, 1.0, size=(pdf.shape[0], n_fine))
        # invert all CDFs in one searchsorted: offset row r by +r so the
        # flattened cdf stays ascending and each query lands in its own row
        n_rays, n_edges = cdf.shape
        row_off = np.arange(n_rays)[:, None].astype(float)
        flat = np.searchsorted((cdf + row_off).ravel(), (u + row_off).ravel(), side="right")
        idx = flat.reshape(n_rays, n_fine) - np.arange(n_rays)[:, None] * n_edges - 1
        idx = np.clip(idx, 0, pdf.shape[1] - 1)
        c0 = np.take_along_axis(cdf, idx, axis=1)
        c1 = np.take_along_axis(cdf, idx + 1, axis=1)
        e0 = np.take_along_axis(edges, idx, axis=1)
        e1 = np.take_along_axis(edges, idx + 1, axis=1)
        denom = np.where(c1 - c0 < 1e-12, 1.0, c1 - c0)
        t_fine = e0 + (u - c0) / denom * (e1 - e0)
        t_all = np.sort(np.concatenate([coarse.t, t_fine], axis=1), axis=1)
    else:
        t_all = np.sort(coarse.t, axis=1)

    # enforce strict monotonicity (a fine draw can collide with a coarse sample)
    for _ in range(2):
        dup = t_all[:, 1:] <= t_all[:, :-1]
        if not dup.any():
            break
        t_all[:, 1:][dup] = np.nextafter(t_all[:, :-1][dup], np.inf)

    edges_all = _interval_edges(t_all, rays.t_near, rays.t_far)
    delta = np.diff(edges_all, axis=1)
    positions = rays.origins[:, None, :] + t_all[..., None] * rays.directions[:, None, :]
    return SampleSet(t=t_all, delta=delta, positions=positions, rays=rays)
