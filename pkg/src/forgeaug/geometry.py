"""Facial landmarks, the 10-region vocabulary, hull masks, similarity alignment.

Landmarks follow the 68-point iBUG layout; "left" and "right" are as seen in
the image (image-left eye = indices 36-41).

========  =========  ========
part      indices    count
========  =========  ========
jaw       0-16       17
brows     17-26      10
nose      27-35      9
left eye  36-41      6
right eye 42-47      6
mouth     48-67      20
========  =========  ========
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_LANDMARKS = 68
N_REGIONS = 10

LEFT_EYE, RIGHT_EYE, NOSE, MOUTH = "left_eye", "right_eye", "nose", "mouth"
PARTS = (LEFT_EYE, RIGHT_EYE, NOSE, MOUTH)

PART_INDICES = {
    LEFT_EYE: tuple(range(36, 42)),
    RIGHT_EYE: tuple(range(42, 48)),
    NOSE: tuple(range(27, 36)),
    MOUTH: tuple(range(48, 68)),
}

REGION_TABLE = (
    frozenset({LEFT_EYE}),
    frozenset({RIGHT_EYE}),
    frozenset({NOSE}),
    frozenset({MOUTH}),
    frozenset({LEFT_EYE, RIGHT_EYE}),
    frozenset({LEFT_EYE, NOSE}),
    frozenset({RIGHT_EYE, NOSE}),
    frozenset({NOSE, MOUTH}),
    frozenset({LEFT_EYE, RIGHT_EYE, NOSE}),
    frozenset({LEFT_EYE, RIGHT_EYE, NOSE, MOUTH}),
)

DEFAULT_FALLBACK_RADIUS = 3.0


def region_parts(region):
    """Base facial parts making up ``region`` (0-9)."""
    if isinstance(region, bool) or int(region) != region or not 0 <= region < N_REGIONS:
        raise ValueError(f"region index must be an integer in 0..9, got {region!r}")
    return REGION_TABLE[int(region)]


def default_dilation(height, width):
    """4 px at 64x64, scaled with the shorter side."""
    return 4.0 * min(height, width) / 64.0


def check_landmarks(landmarks, height=None, width=None, margin=0.0):
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.shape != (N_LANDMARKS, 2):
        raise ValueError(f"landmarks must have shape (68, 2), got {lm.shape}")
    if not np.all(np.isfinite(lm)):
        raise ValueError("landmarks contain non-finite values")
    if height is not None and width is not None:
        x, y = lm[:, 0], lm[:, 1]
        if (x.min() < margin or y.min() < margin
                or x.max() > width - 1 - margin or y.max() > height - 1 - margin):
            raise ValueError(f"landmarks fall outside the {height}x{width} image (margin {margin})")
    return lm


# ------------------------------------------------------------------ polygons

def convex_hull(points):
    """Counter-clockwise hull (monotone chain); collinear points dropped."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _pixel_grid(height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def _segment_distance(xs, ys, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros_like(xs) if denom == 0 else np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0, 1)
    return np.hypot(xs - (a[0] + t * ab[0]), ys - (a[1] + t * ab[1]))


def hull_mask(hull, height, width, dilation=0.0):
    """Pixels whose centre lies inside ``hull`` or within ``dilation`` of it.

    Pixel (i, j) has centre (x=j, y=i). ``hull`` must be counter-clockwise
    in (x, y) with y pointing down, as returned by :func:`convex_hull`.
    """
    xs, ys = _pixel_grid(height, width)
    inside = np.ones((height, width), dtype=bool)
    n = len(hull)
    for k in range(n):
        a, b = hull[k], hull[(k + 1) % n]
        inside &= (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0]) >= -1e-9
    if dilation > 0:
        dist = np.min([_segment_distance(xs, ys, hull[k], hull[(k + 1) % n]) for k in range(n)], axis=0)
        inside |= dist <= dilation
    return inside


def disc_mask(center, radius, height, width):
    xs, ys = _pixel_grid(height, width)
    return np.hypot(xs - center[0], ys - center[1]) <= radius


def rasterize_region(landmarks, region, height, width, dilation=None,
                     fallback_radius=DEFAULT_FALLBACK_RADIUS, return_info=False):
    """Binary mask: union of the dilated convex hulls of the region's parts.

    A part whose landmarks span zero area is replaced by a disc of
    ``fallback_radius + dilation`` around its centroid and listed under
    ``info["degenerate_parts"]``.
    """
    lm = check_landmarks(landmarks, height, width)
    if dilation is None:
        dilation = default_dilation(height, width)
    if dilation < 0:
        raise ValueError(f"dilation must be >= 0, got {dilation}")
    mask = np.zeros((height, width), dtype=bool)
    degenerate = []
    for part in sorted(region_parts(region)):
        pts = lm[list(PART_INDICES[part])]
        hull = convex_hull(pts)
        if len(hull) < 3 or polygon_area(hull) < 1e-9:
            degenerate.append(part)
            mask |= disc_mask(pts.mean(axis=0), fallback_radius + dilation, height, width)
        else:
            mask |= hull_mask(hull, height, width, dilation)
    mask = mask.astype(np.float64)
    if return_info:
        return mask, {"degenerate_parts": degenerate}
    return mask


# ---------------------------------------------------------------- alignment

@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(rotation) @ p + translation`` on (x, y) points."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def matrix(self):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + np.asarray(self.translation)

    def inverse(self):
        inv_scale = 1.0 / self.scale
        t = -(inv_scale * np.array([[np.cos(-self.rotation), -np.sin(-self.rotation)],
                                    [np.sin(-self.rotation), np.cos(-self.rotation)]])) @ np.asarray(self.translation)
        return SimilarityTransform(inv_scale, -self.rotation, (float(t[0]), float(t[1])))

    def is_identity(self):
        return self.scale == 1.0 and self.rotation == 0.0 and tuple(self.translation) == (0.0, 0.0)


def estimate_alignment(src, dst):
    """Least-squares similarity taking ``src`` points onto ``dst`` (Umeyama, no reflection)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"point sets must both be (n, 2), got {src.shape} and {dst.shape}")
    if len(src) < 2:
        raise ValueError("need at least 2 points to estimate a similarity")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum()
    if var_s == 0:
        raise ValueError("source points are all identical")
    # cross-covariance terms for the 2-D closed form
    a = (xs * xd).sum()
    b = (xs[:, 0] * xd[:, 1] - xs[:, 1] * xd[:, 0]).sum()
    rotation = float(np.arctan2(b, a))
    scale = float(np.hypot(a, b) / var_s)
    if scale == 0:
        raise ValueError("destination points are all identical")
    if np.array_equal(src, dst):
        return SimilarityTransform()
    c, s = np.cos(rotation), np.sin(rotation)
    t = mu_d - scale * np.array([[c, -s], [s, c]]) @ mu_s
    return SimilarityTransform(scale, rotation, (float(t[0]), float(t[1])))


def bilinear_sample(img, xs, ys):
    """Sample ``img`` (H, W[, C]) at float coords; out-of-range clamps to the edge."""
    h, w = img.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def warp_image(img, transform):
    """Resample ``img`` so that source point p lands at ``transform(p)``."""
    img = np.asarray(img, dtype=np.float64)
    if transform.is_identity():
        return img.copy()
    h, w = img.shape[:2]
    xs, ys = _pixel_grid(h, w)
    inv = transform.inverse()
    src = inv.apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    out = bilinear_sample(img, src[:, 0].reshape(h, w), src[:, 1].reshape(h, w))
    return out


# -------------------------------------------------------------------- files

def save_landmarks(path, landmarks):
    lm = check_landmarks(landmarks)
    Path(path).write_text("".join(f"{x!r} {y!r}\n" for x, y in lm.tolist()))


def load_landmarks(path):
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    return check_landmarks(np.array(rows))
