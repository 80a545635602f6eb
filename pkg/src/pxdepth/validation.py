"""Input checks for the estimator front end."""
import math

import numpy as np

from .exceptions import DataError, ShapeMismatch


def check_resolution(height, width, patch=16):
    if height % patch or width % patch:
        ph, pw = math.ceil(height / patch) * patch, math.ceil(width / patch) * patch
        raise ShapeMismatch(
            f"resolution {height}x{width} is not divisible by the coarse patch {patch}; pad to {ph}x{pw}"
        )
    return height, width


def _as_float_rgb(x, name):
    x = np.asarray(x)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    elif not np.issubdtype(x.dtype, np.number):
        raise DataError(f"{name} must be numeric, got dtype {x.dtype}")
    x = x.astype(np.float32)
    if x.shape[-1] != 3:
        raise ShapeMismatch(f"{name} must have 3 trailing color channels, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError(f"{name} contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise DataError(f"{name} values must lie in [0, 1] (or be uint8)")
    return x


def check_images(X, patch=16):
    """Return ``(N, H, W, 3)`` float32 images in [0, 1]; a single image gains a batch axis."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeMismatch(f"expected (N, H, W, 3) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise DataError("no images given")
    X = _as_float_rgb(X, "images")
    check_resolution(X.shape[1], X.shape[2], patch)
    return X


def check_clips(X, patch=16):
    """Return ``(N, T, H, W, 3)`` float32 clips; a single clip gains a batch axis."""
    X = np.asarray(X)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5:
        raise ShapeMismatch(f"expected (N, T, H, W, 3) clips, got shape {X.shape}")
    if X.shape[0] == 0 or X.shape[1] < 2:
        raise DataError("clips need at least one clip of two or more frames")
    X = _as_float_rgb(X, "clips")
    check_resolution(X.shape[2], X.shape[3], patch)
    return X


def check_depths(y, shape):
    """Depths in meters matching ``shape``; 0 or non-finite marks invalid pixels."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != tuple(shape):
        if y.shape == tuple(shape[1:]) and shape[0] == 1:
            y = y[None]
        else:
            raise ShapeMismatch(f"depths have shape {y.shape}, expected {tuple(shape)}")
    if (y[np.isfinite(y)] < 0).any():
        raise DataError("depths must be non-negative")
    valid = np.isfinite(y) & (y > 0)
    if not valid.any():
        raise DataError("depths contain no valid pixels")
    return y
