"""Input validation for the estimator front-end."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ArgumentError


def check_images(X, n_levels=None):
    """Return a float32 ``(N, 3, H, W)`` batch with finite values."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True, ensure_2d=False)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ArgumentError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    _check_extent(X.shape[-2:], n_levels)
    return X


def check_pairs(X, n_levels=None):
    """Return a float32 ``(N, 2, 3, H, W)`` batch of (distorted, reference) pairs."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True, ensure_2d=False)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[1:3] != (2, 3):
        raise ArgumentError(f"expected pairs of shape (N, 2, 3, H, W), got {X.shape}")
    _check_extent(X.shape[-2:], n_levels)
    return X


def check_targets(y, n_samples, bins=None):
    y = np.asarray(y, dtype=np.float64)
    if bins is None:
        y = y.reshape(-1)
        if y.size != n_samples:
            raise ArgumentError(f"{y.size} targets for {n_samples} samples")
    else:
        if y.shape != (n_samples, bins):
            raise ArgumentError(f"distribution targets must be ({n_samples}, {bins}), got {y.shape}")
        if np.any(y < 0) or np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-4):
            raise ArgumentError("each target distribution must be nonnegative and sum to 1")
    if not np.all(np.isfinite(y)):
        raise ArgumentError("targets contain NaN or infinity")
    return y


def _check_extent(hw, n_levels):
    if n_levels is None:
        return
    step = 2 ** n_levels
    if hw[0] % step or hw[1] % step:
        raise ArgumentError(f"image extent {hw[0]}x{hw[1]} is not divisible by 2^{n_levels}={step}")
