"""Forward and backward volume rendering.

Two renderers share the weight math w_i = T_i (1 - exp(-sigma_i delta_i)):

* baseline: rgb = sum_i w_i c_i, the conventional quadrature.
* single_surface: the cumulative weight omega is scanned for its crossing of
  0.5; the crossing depth mu_t becomes the mean of a fixed-std Gaussian that
  replaces the weight distribution, clamped to the Gaussian peak after adding
  a constant `base` offset that models the surrounding medium. Colors along
  the ray are left untouched; rays whose omega never crosses 0.5 fall back to
  the baseline renderer.

The backward pass is the exact chain rule of this forward map, with the
crossing index held fixed and a zero gradient on the clamped branch.
"""

import csv
from dataclasses import dataclass

import numpy as np

_EPS_ACC = 1e-10


@dataclass
class RenderSettings:
    renderer: str = "single_surface"  # "baseline" | "single_surface"
    eta: float = 0.5
    base: float = 0.2
    normalize_weights: bool = False

    def validate(self):
        if self.renderer not in ("baseline", "single_surface"):
            raise ValueError(f"unknown renderer {self.renderer!r}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.base < 0:
            raise ValueError("base must be nonnegative")
        return self


@dataclass
class WeightProfile:
    """Per-ray weight vectors at each pipeline stage, recorded for backward."""

    w: np.ndarray                 # (R, S) raw weights
    omega: np.ndarray             # (R, S) inclusive cumulative sum of w
    alpha: np.ndarray             # (R, S) 1 - exp(-sigma delta)
    trans: np.ndarray             # (R, S) transmittance T_i before sample i
    mu_t: np.ndarray = None       # (R,) median depth (valid where surface_found)
    surface_found: np.ndarray = None  # (R,) bool
    w_hat: np.ndarray = None      # (R, S) final render weights W_i
    gauss: np.ndarray = None      # (R, S) unclamped Gaussian values
    settings: RenderSettings = None


@dataclass
class RenderOutput:
    rgb: np.ndarray            # (R, 3)
    depth: np.ndarray          # (R,)
    accumulation: np.ndarray   # (R,)
    fallback: np.ndarray = None  # (R,) bool, True where baseline fallback was used


def compute_weights(samples, sigma):
    """Raw weights and their cumulative sum from per-sample densities.

    T_i = exp(-sum_{j<i} sigma_j delta_j); w_i = T_i (1 - exp(-sigma_i delta_i)).
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("densities must be nonnegative")
    tau = sigma * samples.delta
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(cum - tau))          # exclusive prefix sum
    alpha = -np.expm1(-tau)
    w = trans * alpha
    omega = np.cumsum(w, axis=-1)
    return WeightProfile(w=w, omega=omega, alpha=alpha, trans=trans)


def _crossing_terms(profile, samples):
    """Gather the crossing interval: k, t_{k-1}, t_k, omega_{k-1}, w_k.

    Uses omega_{-1} = 0 and t_{-1} = t_near when the crossing happens in the
    first interval. Only meaningful where the ray actually crosses 0.5.
    """
    omega, t = profile.omega, samples.t
    k = np.argmax(omega > 0.5, axis=-1)  # first crossing index (0 if none; guarded by caller)
    rows = np.arange(t.shape[0])
    t_k = t[rows, k]
    w_k = profile.w[rows, k]
    t_prev = np.where(k > 0, t[rows, np.maximum(k - 1, 0)], samples.rays.t_near)
    om_prev = np.where(k > 0, omega[rows, np.maximum(k - 1, 0)], 0.0)
    return k, t_prev, t_k, om_prev, w_k


def median_depth(profile, samples):
    """Depth where omega first exceeds 0.5, linearly interpolated in its interval.

    Returns (mu_t, surface_found); mu_t is NaN where no crossing exists.
    """
    surface_found = profile.omega[:, -1] > 0.5
    k, t_prev, t_k, om_prev, w_k = _crossing_terms(profile, samples)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = t_prev + (0.5 - om_prev) / w_k * (t_k - t_prev)
    mu = np.where(surface_found, mu, np.nan)
    return mu, surface_found


def gaussian_weights(samples, mu_t, eta, base):
    """Redistributed weights: Gaussian(mu_t, eta) plus a clamped medium offset.

    Returns (w_clamped, W) where w_clamped = min(peak, gaussian + base) is the
    continuous weight density and W = w_clamped * delta is the per-sample
    render weight.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if base < 0:
        raise ValueError("base must be nonnegative")
    mu_t = np.asarray(mu_t, dtype=float)
    peak = 1.0 / (np.sqrt(2.0 * np.pi) * eta)
    gauss = peak * np.exp(-((samples.t - mu_t[..., None]) ** 2) / (2.0 * eta**2))
    w_clamped = np.minimum(peak, gauss + base)
    return w_clamped, w_clamped * samples.delta


def forward(samples, field_out, settings):
    """Render a batch with the configured renderer.

    Returns (RenderOutput, WeightProfile); the profile records everything the
    backward pass needs.
    """
    settings.validate()
    profile = compute_weights(samples, field_out.sigma)
    w, c = profile.w, field_out.rgb

    rgb_base = np.einsum("rs,rsc->rc", w, c)
    acc_base = w.sum(axis=-1)
    depth_base = np.einsum("rs,rs->r", w, samples.t) / np.maximum(acc_base, _EPS_ACC)

    if settings.renderer == "baseline":
        profile.settings = settings
        return RenderOutput(rgb=rgb_base, depth=depth_base, accumulation=acc_base), profile

    mu, found = median_depth(profile, samples)
    mu_safe = np.where(found, mu, samples.rays.t_near)  # placeholder on fallback rays
    peak = 1.0 / (np.sqrt(2.0 * np.pi) * settings.eta)
    gauss = peak * np.exp(-((samples.t - mu_safe[:, None]) ** 2) / (2.0 * settings.eta**2))
    W = np.minimum(peak, gauss + settings.base) * samples.delta
    acc_ss = W.sum(axis=-1)
    if settings.normalize_weights:
        W_render = W / np.maximum(acc_ss, _EPS_ACC)[:, None]
    else:
        W_render = W
    rgb_ss = np.einsum("rs,rsc->rc", W_render, c)

    rgb = np.where(found[:, None], rgb_ss, rgb_base)
    depth = np.where(found, mu_safe, depth_base)
    acc = np.where(found, W_render.sum(axis=-1), acc_base)

    profile.mu_t = mu
    profile.surface_found = found
    profile.w_hat = W
    profile.gauss = gauss
    profile.settings = settings
    return RenderOutput(rgb=rgb, depth=depth, accumulation=acc, fallback=~found), profile


def render_baseline(samples, field_out):
    out, _ = forward(samples, field_out, RenderSettings(renderer="baseline"))
    return out


def render_single_surface(samples, field_out, eta=0.5, base=0.2, normalize_weights=False):
    return forward(
        samples, field_out,
        RenderSettings("single_surface", eta=eta, base=base, normalize_weights=normalize_weights),
    )


def _weight_grads_to_sigma(g_w, profile, samples):
    """Chain dL/dw_i back to dL/dsigma_i.

    dw_i/dsigma_i = T_i delta_i exp(-sigma_i delta_i); for j < i the path runs
    through the transmittance: dw_i/dsigma_j = -delta_j w_i.
    """
    gw_w = g_w * profile.w
    suffix = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1] - gw_w  # sum over j > i
    return samples.delta * (g_w * profile.trans * (1.0 - profile.alpha) - suffix)


def renderer_backward(samples, field_out, profile, d_rgb_upstream, weight_grad_scale=None):
    """Exact gradients of the recorded forward pass.

    d_rgb_upstream: (R, 3) upstream gradient of the per-ray rendered color.
    weight_grad_scale: optional (R, S) multiplier applied to dL/dw_i before
    the weight-to-density chain (depth-based gradient scaling hook).

    Returns (d_sigma, d_rgb) per sample.
    """
    if profile.settings is None:
        raise ValueError("profile lacks a forward record; run forward() first")
    u = np.asarray(d_rgb_upstream, dtype=float)
    if u.shape != (profile.w.shape[0], 3):
        raise ValueError(f"upstream gradient shape {u.shape} != {(profile.w.shape[0], 3)}")
    c = field_out.rgb
    settings = profile.settings

    g_w_base = np.einsum("rc,rsc->rs", u, c)
    d_c_base = u[:, None, :] * profile.w[..., None]

    if settings.renderer == "baseline":
        g_w, d_c = g_w_base, d_c_base
    else:
        if profile.mu_t is None or profile.w_hat is None:
            raise ValueError("profile lacks the single-surface forward record")
        found = profile.surface_found
        W, gauss = profile.w_hat, profile.gauss
        eta = settings.eta
        peak = 1.0 / (np.sqrt(2.0 * np.pi) * eta)
        mu_safe = np.where(found, profile.mu_t, samples.rays.t_near)

        if settings.normalize_weights:
            S = np.maximum(W.sum(axis=-1), _EPS_ACC)
            rgb_ss = np.einsum("rs,rsc->rc", W / S[:, None], c)
            g_W = (g_w_base - (u * rgb_ss).sum(axis=-1)[:, None]) / S[:, None]
            d_c_ss = u[:, None, :] * (W / S[:, None])[..., None]
        else:
            g_W = g_w_base
            d_c_ss = u[:, None, :] * W[..., None]

        # through W_i = min(peak, gauss_i + base) * delta_i; zero on the clamp
        unclamped = (gauss + settings.base) < peak
        dW_dmu = np.where(
            unclamped,
            samples.delta * gauss * (samples.t - mu_safe[:, None]) / eta**2,
            0.0,
        )
        dL_dmu = (g_W * dW_dmu).sum(axis=-1)  # (R,)

        # through mu = t_prev + (0.5 - omega_prev) / w_k * (t_k - t_prev),
        # with omega_prev = sum_{j<k} w_j and k held fixed
        k, t_prev, t_k, om_prev, w_k = _crossing_terms(profile, samples)
        w_k = np.where(found, w_k, 1.0)  # fallback rays are masked out below
        span = t_k - t_prev
        dmu_dwj = -span / w_k                          # j < k, via omega_prev
        dmu_dwk = -(0.5 - om_prev) * span / w_k**2     # j = k
        cols = np.arange(profile.w.shape[1])
        before = cols[None, :] < k[:, None]
        at_k = cols[None, :] == k[:, None]
        g_w_ss = dL_dmu[:, None] * (np.where(before, dmu_dwj[:, None], 0.0)
                                    + np.where(at_k, dmu_dwk[:, None], 0.0))

        g_w = np.where(found[:, None], g_w_ss, g_w_base)
        d_c = np.where(found[:, None, None], d_c_ss, d_c_base)

    if weight_grad_scale is not None:
        g_w = g_w * weight_grad_scale
    d_sigma = _weight_grads_to_sigma(g_w, profile, samples)
    return d_sigma, d_c


def write_profile_csv(path, profile, samples):
    """Dump per-ray, per-sample (t, w, omega, W, mu_t) rows for inspection."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ray", "sample", "t", "w", "omega", "w_hat", "mu_t", "surface_found"])
        R, S = profile.w.shape
        for r in range(R):
            mu = "" if profile.mu_t is None or not np.isfinite(profile.mu_t[r]) else f"{profile.mu_t[r]:.9g}"
            sf = "" if profile.surface_found is None else int(profile.surface_found[r])
            for s in range(S):
                what = "" if profile.w_hat is None else f"{profile.w_hat[r, s]:.9g}"
                writer.writerow(
                    [r, s, f"{samples.t[r, s]:.9g}", f"{profile.w[r, s]:.9g}",
                     f"{profile.omega[r, s]:.9g}", what, mu, sf]
                )
    return path
