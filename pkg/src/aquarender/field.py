"""Trainable voxel-grid radiance field with analytic parameter gradients.

Parameters live on the grid vertices, pre-activation. Queries interpolate
the raw parameters trilinearly and then activate: softplus for density,
sigmoid for color. Out-of-bounds positions return sigma = 0 and a constant
medium color.
"""

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit


class CheckpointError(Exception):
    """Raised when a checkpoint file cannot be read back."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # log(exp(y) - 1), stable for small y
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


DEFAULT_MEDIUM_COLOR = (0.05, 0.15, 0.20)


@dataclass
class VoxelField:
    resolution: tuple          # (nx, ny, nz) cells
    lo: np.ndarray             # (3,) bounds min
    hi: np.ndarray             # (3,) bounds max
    density_params: np.ndarray  # (nx+1, ny+1, nz+1) pre-activation
    color_params: np.ndarray    # (nx+1, ny+1, nz+1, 3) pre-activation
    medium_color: np.ndarray = dc_field(default_factory=lambda: np.array(DEFAULT_MEDIUM_COLOR))

    @property
    def n_vertices(self):
        nx, ny, nz = self.resolution
        return (nx + 1) * (ny + 1) * (nz + 1)

    def copy(self):
        return VoxelField(
            self.resolution, self.lo.copy(), self.hi.copy(),
            self.density_params.copy(), self.color_params.copy(), self.medium_color.copy(),
        )


@dataclass
class FieldOutputs:
    sigma: np.ndarray  # (..., ) per-sample density, >= 0
    rgb: np.ndarray    # (..., 3) per-sample color in [0, 1]


@dataclass
class GradientBuffer:
    d_density: np.ndarray
    d_color: np.ndarray

    @classmethod
    def zeros_like(cls, field):
        return cls(np.zeros_like(field.density_params), np.zeros_like(field.color_params))

    def add_(self, other):
        self.d_density += other.d_density
        self.d_color += other.d_color
        return self

    def zero_(self):
        self.d_density[...] = 0.0
        self.d_color[...] = 0.0
        return self


def create_field(resolution, bounds, init_density=0.01, medium_color=DEFAULT_MEDIUM_COLOR):
    """Near-empty field: constant density `init_density`, mid-gray color."""
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    resolution = tuple(int(r) for r in resolution)
    if min(resolution) < 2:
        raise ValueError(f"grid resolution must be >= 2 cells per axis, got {resolution}")
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if np.any(hi <= lo):
        raise ValueError("field bounds must satisfy lo < hi per axis")
    vshape = tuple(r + 1 for r in resolution)
    density = np.full(vshape, softplus_inv(init_density))
    color = np.zeros(vshape + (3,))
    return VoxelField(resolution, lo, hi, density, color, np.asarray(medium_color, dtype=float))


@dataclass
class _Ctx:
    """Interpolation record shared between a query and its backward pass."""

    inb: np.ndarray        # (m,) in-bounds mask
    idx8: np.ndarray       # (m, 8) flat vertex indices
    w8: np.ndarray         # (m, 8) trilinear weights
    pre_sigma: np.ndarray  # (m,)
    pre_rgb: np.ndarray    # (m, 3) or None for sigma-only queries
    rgb: np.ndarray        # activated color, or None


def _corner_offsets(resolution):
    nx, ny, nz = resolution
    out = np.empty(8, dtype=np.int64)
    i = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                out[i] = (dx * (ny + 1) + dy) * (nz + 1) + dz
                i += 1
    return out


def _cell_and_frac(fld, positions):
    pts = positions.reshape(-1, 3)
    res = np.asarray(fld.resolution, dtype=float)
    g = (pts - fld.lo) / (fld.hi - fld.lo) * res
    inb = np.all((g >= 0.0) & (g <= res), axis=-1)
    cell = np.clip(np.floor(g), 0, res - 1).astype(np.int64)
    frac = np.clip(g - cell, 0.0, 1.0)
    nx, ny, nz = fld.resolution
    base = (cell[:, 0] * (ny + 1) + cell[:, 1]) * (nz + 1) + cell[:, 2]
    idx8 = base[:, None] + _corner_offsets(fld.resolution)[None, :]
    return inb, idx8, frac


def _setup(fld, positions, need_rgb=True):
    inb, idx8, frac = _cell_and_frac(fld, positions)
    fx, fy, fz = frac[:, 0:1], frac[:, 1:2], frac[:, 2:3]
    ax = np.concatenate([1.0 - fx, fx], axis=1)
    ay = np.concatenate([1.0 - fy, fy], axis=1)
    az = np.concatenate([1.0 - fz, fz], axis=1)
    w8 = (ax[:, :, None, None] * ay[:, None, :, None] * az[:, None, None, :]).reshape(-1, 8)

    pre_sigma = np.einsum("mq,mq->m", fld.density_params.reshape(-1).take(idx8), w8)
    if need_rgb:
        pre_rgb = np.einsum(
            "mqc,mq->mc", fld.color_params.reshape(-1, 3).take(idx8, axis=0), w8
        )
    else:
        pre_rgb = None
    return _Ctx(inb=inb, idx8=idx8, w8=w8, pre_sigma=pre_sigma, pre_rgb=pre_rgb, rgb=None)


def _interp_sigma(fld, positions):
    """Pre-activation density only, without materializing corner weights."""
    inb, idx8, frac = _cell_and_frac(fld, positions)
    v = fld.density_params.reshape(-1).take(idx8).reshape(-1, 2, 2, 2)
    fz = frac[:, 2]
    v = v[..., 0] * (1.0 - fz)[:, None, None] + v[..., 1] * fz[:, None, None]
    fy = frac[:, 1]
    v = v[..., 0] * (1.0 - fy)[:, None] + v[..., 1] * fy[:, None]
    fx = frac[:, 0]
    return inb, v[..., 0] * (1.0 - fx) + v[..., 1] * fx


def _positions_of(samples):
    return samples.positions if hasattr(samples, "positions") else np.asarray(samples)


def query(fld, samples, _ctx_out=None):
    """Density and color at each sample position."""
    positions = _positions_of(samples)
    shape = positions.shape[:-1]
    ctx = _setup(fld, positions)
    sigma = np.where(ctx.inb, softplus(ctx.pre_sigma), 0.0)
    ctx.rgb = expit(ctx.pre_rgb)
    rgb = np.where(ctx.inb[:, None], ctx.rgb, fld.medium_color)
    if _ctx_out is not None:
        _ctx_out.append(ctx)
    return FieldOutputs(sigma=sigma.reshape(shape), rgb=rgb.reshape(shape + (3,)))


def query_sigma(fld, samples):
    """Density only (used by the coarse sampling pass)."""
    positions = _positions_of(samples)
    shape = positions.shape[:-1]
    inb, pre_sigma = _interp_sigma(fld, positions)
    return np.where(inb, softplus(pre_sigma), 0.0).reshape(shape)


def backward(fld, samples, d_sigma, d_rgb, grads, ctx=None):
    """Accumulate parameter gradients for upstream per-sample gradients.

    d_sigma: (...,) gradient w.r.t. activated density; d_rgb: (..., 3) w.r.t.
    activated color. Chains through the activations and trilinear weights;
    out-of-bounds samples contribute nothing. Pass the ctx captured by query
    to skip recomputing the interpolation record.
    """
    positions = _positions_of(samples)
    d_sigma = np.asarray(d_sigma, dtype=float).reshape(-1)
    d_rgb = np.asarray(d_rgb, dtype=float).reshape(-1, 3)
    if not np.isfinite(d_sigma).all() or not np.isfinite(d_rgb).all():
        bad = ~np.isfinite(d_sigma) | ~np.isfinite(d_rgb).all(axis=1)
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite upstream gradient at sample {i}")

    if ctx is None:
        ctx = _setup(fld, positions)
        ctx.rgb = expit(ctx.pre_rgb)
    act_sigma_grad = expit(ctx.pre_sigma)          # softplus'
    act_rgb_grad = ctx.rgb * (1.0 - ctx.rgb)       # sigmoid'

    d_pre_sigma = np.where(ctx.inb, d_sigma * act_sigma_grad, 0.0)
    d_pre_rgb = np.where(ctx.inb[:, None], d_rgb * act_rgb_grad, 0.0)

    nv = fld.n_vertices
    flat_idx = ctx.idx8.ravel()
    grads.d_density += np.bincount(
        flat_idx, weights=(d_pre_sigma[:, None] * ctx.w8).ravel(), minlength=nv
    ).reshape(grads.d_density.shape)
    for c in range(3):
        grads.d_color[..., c] += np.bincount(
            flat_idx, weights=(d_pre_rgb[:, c, None] * ctx.w8).ravel(), minlength=nv
        ).reshape(grads.d_color[..., c].shape)
    return grads


def save_checkpoint(fld, path, config=None):
    """Write the field (+ an optional config dict) to .npz (binary) or .json."""
    path = str(path)
    cfg_json = json.dumps(config if config is not None else {}, sort_keys=True)
    if path.endswith(".json"):
        doc = {
            "resolution": list(fld.resolution),
            "lo": fld.lo.tolist(), "hi": fld.hi.tolist(),
            "density_params": fld.density_params.tolist(),
            "color_params": fld.color_params.tolist(),
            "medium_color": fld.medium_color.tolist(),
            "config": json.loads(cfg_json),
        }
        with open(path, "w") as f:
            json.dump(doc, f)
    else:
        np.savez(
            path if path.endswith(".npz") else path + ".npz",
            resolution=np.asarray(fld.resolution, dtype=np.int64),
            lo=fld.lo, hi=fld.hi,
            density_params=fld.density_params,
            color_params=fld.color_params,
            medium_color=fld.medium_color,
            config_json=np.array(cfg_json),
        )
    return path


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint. Returns (field, config)."""
    path = str(path)
    try:
        if path.endswith(".json"):
            with open(path) as f:
                doc = json.load(f)
            fld = VoxelField(
                tuple(int(r) for r in doc["resolution"]),
                np.asarray(doc["lo"], dtype=float), np.asarray(doc["hi"], dtype=float),
                np.asarray(doc["density_params"], dtype=float),
                np.asarray(doc["color_params"], dtype=float),
                np.asarray(doc["medium_color"], dtype=float),
            )
            cfg = doc.get("config", {})
        else:
            with np.load(path, allow_pickle=False) as z:
                fld = VoxelField(
                    tuple(int(r) for r in z["resolution"]),
                    z["lo"], z["hi"],
                    z["density_params"], z["color_params"], z["medium_color"],
                )
                cfg = json.loads(str(z["config_json"]))
        expected = tuple(r + 1 for r in fld.resolution)
        if fld.density_params.shape != expected or fld.color_params.shape != expected + (3,):
            raise ValueError("parameter arrays do not match the stored resolution")
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot load checkpoint {path}: {e}") from e
    return fld, cfg
