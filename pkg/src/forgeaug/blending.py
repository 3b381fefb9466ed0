"""Forgery rendering: colour transfer, alpha / Poisson / mixup blending.

Images are float arrays of shape (H, W, 3) in [0, 1]; masks are (H, W).
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import sparse

from .config import BlendType, ForgeryConfig
from .geometry import estimate_alignment, rasterize_region, warp_image
from .masks import blur_mask, check_mask, deform_mask

POISSON_TOL = 1e-10
POISSON_THRESHOLD = 0.5


class PoissonError(RuntimeError):
    """The Poisson system is ill-posed or the solver did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def check_image(img, shape=None):
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {a.shape}")
    if shape is not None and a.shape[:2] != tuple(shape[:2]):
        raise ValueError(f"image shape {a.shape} does not match {tuple(shape)}")
    if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
        raise ValueError("image values must be finite and within [0, 1]")
    return a


def default_deform_magnitude(height, width):
    return 2.0 * min(height, width) / 64.0


def color_transfer(src, dst, mask):
    """Shift each channel of ``src`` so its mean over the mask support matches ``dst``."""
    src = check_image(src)
    dst = check_image(dst, src.shape)
    support = check_mask(mask, src.shape[:2]) > 0
    if not support.any():
        raise ValueError("colour transfer needs a mask with nonempty support")
    shift = dst[support].mean(axis=0) - src[support].mean(axis=0)
    out = src.copy()
    out[support] = np.clip(src[support] + shift, 0.0, 1.0)
    return out


def alpha_blend(ip, if_, md):
    ip = check_image(ip)
    if_ = check_image(if_, ip.shape)
    m = check_mask(md, ip.shape[:2])[..., None]
    return m * if_ + (1.0 - m) * ip


def mixup_blend(ip, if_, md, ratio):
    """``ratio * md * (if_ - ip) + ip``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mixup ratio must be in [0, 1], got {ratio}")
    ip = check_image(ip)
    if_ = check_image(if_, ip.shape)
    m = check_mask(md, ip.shape[:2])[..., None]
    return ratio * m * (if_ - ip) + ip


# ---------------------------------------------------------------- Poisson

def conjugate_gradient(matvec, b, tol=POISSON_TOL, max_iter=None):
    """Solve ``A x = b`` column-wise for SPD ``A``; stops when max|r| <= tol.

    Returns ``(x, max_abs_residual, iterations)``.
    """
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    if max_iter is None:
        max_iter = 10 * b.shape[0]
    x = np.zeros_like(b)
    r = b.copy()
    it = 0
    # the recursive residual drifts from b - A x; restart from the true one
    # until that meets tol too
    while True:
        p = r.copy()
        rs = (r * r).sum(axis=0)
        while it < max_iter and np.abs(r).max(initial=0.0) > tol:
            ap = matvec(p)
            curv = (p * ap).sum(axis=0)
            alpha = np.divide(rs, curv, out=np.zeros_like(rs), where=curv > 0)
            x += alpha * p
            r -= alpha * ap
            rs_new = (r * r).sum(axis=0)
            beta = np.divide(rs_new, rs, out=np.zeros_like(rs), where=rs > 0)
            p = r + beta * p
            rs = rs_new
            it += 1
        r = b - matvec(x)
        residual = float(np.abs(r).max(initial=0.0))
        if residual <= tol or it >= max_iter:
            break
    return (x[:, 0] if squeeze else x), residual, it


def poisson_system(target, source, interior):
    """Sparse 5-point system for seamless cloning of ``source`` into ``target``.

    Unknowns are the interior pixels in row-major order. Row p reads
    ``4 u_p - sum_{q in N(p) & interior} u_q = 4 f_p - sum_{q in N(p)} f_q
    + sum_{q in N(p) - interior} t_q`` with f = source and t = target.
    Returns ``(A, b, coords)``.
    """
    h, w = interior.shape
    coords = np.argwhere(interior)
    n = len(coords)
    index = -np.ones((h, w), dtype=np.intp)
    index[interior] = np.arange(n)
    ii, jj = coords[:, 0], coords[:, 1]
    rows, cols = [np.arange(n)], [np.arange(n)]
    vals = [np.full(n, 4.0)]
    b = 4.0 * source[ii, jj]
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ni, nj = ii + di, jj + dj
        b = b - source[ni, nj]
        nb = index[ni, nj]
        inner = nb >= 0
        rows.append(np.arange(n)[inner])
        cols.append(nb[inner])
        vals.append(-np.ones(inner.sum()))
        b[~inner] += target[ni[~inner], nj[~inner]]
    a = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return a, b, coords


def solve_poisson(target, source, interior, tol=POISSON_TOL, max_iter=None):
    """Unclamped seamless-cloning solution; returns ``(image, residual)``.

    CG runs on the correction ``d = u - source``, whose right-hand side is
    the boundary mismatch ``target - source``; it is exactly zero when the
    two agree around the interior, so that case returns ``target`` exactly.
    """
    interior = np.asarray(interior, dtype=bool)
    if not interior.any():
        raise PoissonError("Poisson interior is empty")
    if interior[0].any() or interior[-1].any() or interior[:, 0].any() or interior[:, -1].any():
        raise PoissonError("Poisson interior touches the image border")
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    a, _, coords = poisson_system(target, source, interior)
    ii, jj = coords[:, 0], coords[:, 1]
    rhs = np.zeros((len(coords),) + target.shape[2:])
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ni, nj = ii + di, jj + dj
        outside = ~interior[ni, nj]
        rhs[outside] += target[ni[outside], nj[outside]] - source[ni[outside], nj[outside]]
    if max_iter is None:
        max_iter = 10 * len(coords)
    d, residual, _ = conjugate_gradient(lambda v: a @ v, rhs, tol=tol, max_iter=max_iter)
    if residual > tol:
        raise PoissonError(f"conjugate gradient did not converge (residual {residual:.3e})", residual)
    out = target.copy()
    out[ii, jj] = source[ii, jj] + d
    return out, residual


def poisson_blend(ip, if_, mask, threshold=POISSON_THRESHOLD, tol=POISSON_TOL):
    """Seamless cloning of ``if_`` into ``ip`` over ``mask > threshold``."""
    ip = check_image(ip)
    if_ = check_image(if_, ip.shape)
    interior = check_mask(mask, ip.shape[:2]) > threshold
    out, _ = solve_poisson(ip, if_, interior, tol=tol)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------- pipeline

def synthesize(ip, lm_p, if_, lm_f, cfg: ForgeryConfig, rng, dilation=None,
               deform_magnitude=None, blur_kernel=None):
    """Render a forgery of ``ip`` using the parts of ``if_`` picked by ``cfg``.

    Returns ``(forgery, mask)`` where ``mask`` is the blend weight map actually
    applied: the deformed, blurred region mask, binarised for Poisson.
    """
    if cfg.blend == BlendType.NONE:
        raise ValueError("do-nothing configs are not rendered; route the pristine through unchanged")
    ip = check_image(ip)
    if_ = check_image(if_, ip.shape)
    h, w = ip.shape[:2]
    if deform_magnitude is None:
        deform_magnitude = default_deform_magnitude(h, w)
    hard = rasterize_region(lm_p, cfg.region, h, w, dilation=dilation)
    md = blur_mask(deform_mask(hard, rng, deform_magnitude), kernel_size=blur_kernel, rng=rng)
    if cfg.blend == BlendType.MIXUP:
        return mixup_blend(ip, if_, md, cfg.ratio), md
    ref = warp_image(if_, estimate_alignment(lm_f, lm_p))
    ref = color_transfer(ref, ip, md)
    if cfg.blend == BlendType.ALPHA:
        return alpha_blend(ip, ref, md), md
    binary = (md > POISSON_THRESHOLD).astype(np.float64)
    return poisson_blend(ip, ref, binary), binary


# --------------------------------------------------------------------- I/O

def save_image_png(path, img):
    a = check_image(img)
    Image.fromarray(np.round(255.0 * a).astype(np.uint8)).save(path)


def load_image_png(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def quantize(img):
    """Round to the 8-bit grid the PNG codec stores."""
    return np.round(255.0 * np.asarray(img, dtype=np.float64)) / 255.0


__all__ = [
    "PoissonError", "alpha_blend", "check_image", "color_transfer", "conjugate_gradient",
    "load_image_png", "mixup_blend", "poisson_blend", "poisson_system", "quantize",
    "save_image_png", "solve_poisson", "synthesize",
]
