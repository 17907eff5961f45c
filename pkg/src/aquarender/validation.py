"""Small input-validation helpers shared by the public API."""

import numpy as np
from sklearn.exceptions import NotFittedError


def check_is_fitted(estimator, attribute="field_"):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )


def check_image(img, name="image"):
    arr = np.asarray(img, dtype=float)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must be (h, w, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_rgb_batch(x, name="colors"):
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must be (n, 3), got {arr.shape}")
    return arr
