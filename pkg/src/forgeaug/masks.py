"""Soft-mask operations: random shape deformation, Gaussian feathering, pooling."""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy.ndimage import convolve1d, gaussian_filter, zoom

from .geometry import bilinear_sample

BLUR_KERNELS = (3, 5, 7, 9, 11)
CONTROL_GRID = 8
HEAD_STRIDE = 16


def check_mask(mask, shape=None):
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(m)) or m.min(initial=0.0) < 0 or m.max(initial=0.0) > 1:
        raise ValueError("mask values must be finite and within [0, 1]")
    return m


def displacement_field(shape, rng, magnitude, grid=CONTROL_GRID):
    """Smooth per-axis displacement in [-magnitude, magnitude] on an H x W grid.

    Random offsets on a ``grid x grid`` control lattice are Gaussian-smoothed,
    rescaled so the largest offset equals ``magnitude``, and bilinearly
    interpolated to full resolution.
    """
    h, w = shape
    ctrl = rng.uniform(-1.0, 1.0, size=(2, grid, grid))
    ctrl = np.stack([gaussian_filter(c, sigma=1.0, mode="nearest") for c in ctrl])
    peak = np.abs(ctrl).max()
    if peak > 0:
        ctrl *= magnitude / peak
    field = np.stack([zoom(c, (h / grid, w / grid), order=1, mode="nearest", grid_mode=True) for c in ctrl])
    return np.clip(field, -magnitude, magnitude)


def deform_mask(mask, rng, magnitude):
    """Warp the mask contour by a smooth random displacement field.

    Each output pixel pulls from at most ``ceil(magnitude)`` pixels away per
    axis, so the deformed support stays inside the input support dilated by
    a ``(2k+1) x (2k+1)`` square with ``k = ceil(magnitude)``.
    """
    if magnitude < 0:
        raise ValueError(f"deformation magnitude must be >= 0, got {magnitude}")
    m = check_mask(mask)
    if magnitude == 0 or not m.any():
        return m.copy()
    h, w = m.shape
    dx, dy = displacement_field(m.shape, rng, magnitude)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = bilinear_sample(m, xs + dx, ys + dy)
    return np.clip(out, 0.0, 1.0)


def gaussian_kernel(kernel_size):
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"blur kernel size must be a positive odd integer, got {kernel_size}")
    if kernel_size == 1:
        return np.ones(1)
    sigma = kernel_size / 6.0
    r = np.arange(kernel_size) - kernel_size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def blur_mask(mask, kernel_size=None, rng=None):
    """Separable Gaussian blur (sigma = k/6) with edge-replicate padding.

    ``kernel_size=None`` draws k from ``BLUR_KERNELS`` with ``rng``.
    """
    m = check_mask(mask)
    if kernel_size is None:
        if rng is None:
            raise ValueError("a random kernel size needs an rng")
        kernel_size = int(rng.choice(BLUR_KERNELS))
    k = gaussian_kernel(kernel_size)
    if kernel_size == 1:
        return m.copy()
    out = convolve1d(m, k, axis=0, mode="nearest")
    out = convolve1d(out, k, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def downsample(mask, factor=HEAD_STRIDE):
    """Block average over ``factor x factor`` tiles."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"mask shape {m.shape} is not divisible by {factor}")
    return m.reshape(m.shape[:-2] + (h // factor, factor, w // factor, factor)).mean(axis=(-3, -1))


def downsample_16(mask):
    return downsample(check_mask(mask), HEAD_STRIDE)


def save_mask_png(path, mask):
    m = check_mask(mask)
    Image.fromarray(np.round(255.0 * m).astype(np.uint8)).save(path)


def load_mask_png(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode mask {path}: {exc}") from exc
    return arr / 255.0


__all__ = [
    "BLUR_KERNELS", "HEAD_STRIDE", "blur_mask", "check_mask", "deform_mask",
    "displacement_field", "downsample", "downsample_16", "gaussian_kernel",
    "load_mask_png", "save_mask_png",
]
