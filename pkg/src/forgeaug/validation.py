"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np


def check_images(X, size=None):
    """Float64 ``(n, H, W, 3)`` batch with values in [0, 1]; a single image is promoted."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    if size is not None and X.shape[1] != size:
        raise ValueError(f"images must be {size}x{size}, got {X.shape[1]}x{X.shape[2]}")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return X


def check_binary_labels(y, n):
    y = np.asarray(y).ravel()
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 (pristine) or 1 (forgery)")
    return y.astype(np.intp)


def check_landmark_array(landmarks, n):
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (n, 68, 2):
        raise ValueError(f"expected landmarks of shape ({n}, 68, 2), got {lm.shape}")
    if not np.all(np.isfinite(lm)):
        raise ValueError("landmarks must be finite")
    return lm


def check_forgery_masks(masks, y, shape):
    """One ``shape`` mask per forgery, ``None`` for pristines."""
    if masks is None:
        if np.any(y == 1):
            raise ValueError("forgery samples need ground-truth masks")
        return [None] * len(y)
    if len(masks) != len(y):
        raise ValueError(f"expected {len(y)} masks, got {len(masks)}")
    out = []
    for i, (m, label) in enumerate(zip(masks, y)):
        if label == 0:
            out.append(None)
            continue
        if m is None:
            raise ValueError(f"forgery sample {i} has no mask")
        m = np.asarray(m, dtype=np.float64)
        if m.shape != shape or m.min() < 0 or m.max() > 1:
            raise ValueError(f"mask {i} must be {shape} with values in [0, 1]")
        out.append(m)
    return out
