"""Toy faces, dataset manifests and PNG/landmark codecs.

A manifest is JSON lines: one header line ``{"format": "forgeaug-manifest",
"version": 1}`` followed by one object per sample::

    {"image_path": "images/00003.png", "landmark_path": "landmarks/00003.txt",
     "category": "dataset_forgery", "gt_mask_path": "masks/00003.png"}

Paths are relative to the manifest's directory. ``gt_mask_path`` is present
exactly for dataset forgeries. Extra keys are preserved but not interpreted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .blending import load_image_png, quantize, save_image_png, synthesize
from .config import BlendType, ForgeryConfig
from .geometry import N_LANDMARKS, N_REGIONS, load_landmarks, save_landmarks
from .masks import load_mask_png, save_mask_png
from .records import DATASET_FORGERY, PRISTINE

MANIFEST_FORMAT = "forgeaug-manifest"
MANIFEST_VERSION = 1
SUPERSAMPLE = 4
DONOR_SMOOTHING = 0.8
DONOR_CHECKER = 0.12


class ManifestError(ValueError):
    pass


def derive_seed(*parts):
    """Stable 63-bit seed from integers/strings (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ----------------------------------------------------------------- toy faces

@dataclass
class ToyFaceSpec:
    """Geometry and colours of one toy face, in pixels for a ``size`` canvas."""

    size: int
    seed: int
    face_center: tuple
    face_radii: tuple
    eye_y: float
    eye_dx: float
    eye_radii: tuple
    iris_radius: float
    nose_center: tuple
    nose_radii: tuple
    mouth_center: tuple
    mouth_radii: tuple
    skin: tuple
    iris: tuple
    lips: tuple
    background: tuple
    brow: tuple = (0.25, 0.18, 0.12)
    grain: float = 0.02

    @classmethod
    def random(cls, seed, size=64):
        rng = np.random.default_rng(derive_seed("toy-spec", seed))
        s = size
        cx = s * (0.5 + rng.uniform(-0.04, 0.04))
        cy = s * (0.5 + rng.uniform(-0.02, 0.02))
        scale = rng.uniform(0.9, 1.05)
        frx, fry = s * 0.31 * scale, s * 0.38 * scale
        return cls(
            size=size,
            seed=int(seed),
            face_center=(cx, cy),
            face_radii=(frx, fry),
            eye_y=cy - fry * rng.uniform(0.22, 0.30),
            eye_dx=frx * rng.uniform(0.40, 0.48),
            eye_radii=(s * 0.075 * scale * rng.uniform(0.9, 1.1), s * 0.042 * scale * rng.uniform(0.85, 1.15)),
            iris_radius=s * 0.026 * scale,
            nose_center=(cx + rng.uniform(-0.5, 0.5), cy + fry * rng.uniform(0.0, 0.06)),
            nose_radii=(s * 0.05 * scale * rng.uniform(0.85, 1.15), s * 0.11 * scale),
            mouth_center=(cx + rng.uniform(-0.5, 0.5), cy + fry * rng.uniform(0.48, 0.56)),
            mouth_radii=(s * 0.12 * scale * rng.uniform(0.85, 1.15), s * 0.045 * scale * rng.uniform(0.8, 1.2)),
            skin=tuple(rng.uniform([0.45, 0.30, 0.20], [0.95, 0.80, 0.70])),
            iris=tuple(rng.uniform(0.05, 0.6, size=3)),
            lips=tuple(rng.uniform([0.45, 0.05, 0.10], [0.90, 0.35, 0.40])),
            background=tuple(rng.uniform(0.1, 0.9, size=3)),
            grain=float(rng.uniform(0.025, 0.045)),
        )

    def check(self):
        s = self.size
        cx, cy = self.face_center
        rx, ry = self.face_radii
        if cx - rx < 1 or cy - ry < 1 or cx + rx > s - 2 or cy + ry > s - 2:
            raise ValueError("toy face does not fit inside the canvas")
        return self


def _ellipse_cover(xs, ys, center, radii):
    return ((xs - center[0]) / radii[0]) ** 2 + ((ys - center[1]) / radii[1]) ** 2 <= 1.0


def _ellipse_points(center, radii, angles, shrink=1.0):
    return np.stack([center[0] + shrink * radii[0] * np.cos(angles),
                     center[1] + shrink * radii[1] * np.sin(angles)], axis=1)


def eye_centers(spec):
    cx = spec.face_center[0]
    return (cx - spec.eye_dx, spec.eye_y), (cx + spec.eye_dx, spec.eye_y)


def toy_landmarks(spec):
    """68 landmarks placed on the drawn features (iBUG ordering)."""
    lm = np.zeros((N_LANDMARKS, 2))
    lm[0:17] = _ellipse_points(spec.face_center, spec.face_radii, np.linspace(np.pi, 0.0, 17), 0.97)
    left, right = eye_centers(spec)
    ex, ey = spec.eye_radii
    for offset, centre in ((17, left), (22, right)):
        bx = np.linspace(-ex * 1.1, ex * 1.1, 5)
        lm[offset:offset + 5] = np.stack([centre[0] + bx, centre[1] - ey * 2.0 + 0.15 * np.abs(bx)], axis=1)
    # nose: bridge down the axis, then the lower rim left to right
    ncx, ncy = spec.nose_center
    nrx, nry = spec.nose_radii
    lm[27:31] = np.stack([np.full(4, ncx), ncy + nry * np.array([-0.85, -0.5, -0.15, 0.2])], axis=1)
    lm[31:36] = _ellipse_points(spec.nose_center, spec.nose_radii, np.linspace(0.85 * np.pi, 0.15 * np.pi, 5), 0.95)
    eye_angles = np.array([np.pi, 4 * np.pi / 3, 5 * np.pi / 3, 0.0, np.pi / 3, 2 * np.pi / 3])
    lm[36:42] = _ellipse_points(left, spec.eye_radii, eye_angles, 0.95)
    lm[42:48] = _ellipse_points(right, spec.eye_radii, eye_angles[[3, 2, 1, 0, 5, 4]], 0.95)
    lm[48:60] = _ellipse_points(spec.mouth_center, spec.mouth_radii, np.pi - np.arange(12) * np.pi / 6, 0.95)
    inner = (spec.mouth_radii[0] * 0.7, spec.mouth_radii[1] * 0.4)
    lm[60:68] = _ellipse_points(spec.mouth_center, inner, np.pi - np.arange(8) * np.pi / 4, 1.0)
    return lm


def _smooth_noise(rng, size, cells):
    from scipy.ndimage import zoom

    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells))
    return zoom(coarse, size / cells, order=1, mode="nearest", grid_mode=True)[:size, :size]


def render_toy_face(spec):
    """Anti-aliased toy face and its landmarks."""
    spec.check()
    s = spec.size
    ss = s * SUPERSAMPLE
    rng = np.random.default_rng(derive_seed("toy-render", spec.seed))
    # supersampled pixel centres expressed in output-pixel coordinates
    coords = (np.arange(ss) + 0.5) / SUPERSAMPLE - 0.5
    xs, ys = np.meshgrid(coords, coords)

    def paint(canvas, cover, colour):
        canvas[cover] = colour

    canvas = np.empty((ss, ss, 3))
    canvas[:] = spec.background
    shade = _smooth_noise(rng, ss, 5)[..., None]
    canvas += 0.12 * shade
    face = _ellipse_cover(xs, ys, spec.face_center, spec.face_radii)
    skin = np.asarray(spec.skin)
    skin_shade = 1.0 + 0.06 * _smooth_noise(rng, ss, 4)[..., None]
    canvas[face] = (skin * skin_shade)[face]
    paint(canvas, _ellipse_cover(xs, ys, spec.nose_center, spec.nose_radii), skin * 0.85)
    left, right = eye_centers(spec)
    for centre in (left, right):
        brow_c = (centre[0], centre[1] - spec.eye_radii[1] * 2.0)
        paint(canvas, _ellipse_cover(xs, ys, brow_c, (spec.eye_radii[0] * 1.15, spec.eye_radii[1] * 0.35)), spec.brow)
        paint(canvas, _ellipse_cover(xs, ys, centre, spec.eye_radii), (0.95, 0.95, 0.92))
        paint(canvas, _ellipse_cover(xs, ys, centre, (spec.iris_radius, min(spec.iris_radius, spec.eye_radii[1]))), spec.iris)
        paint(canvas, _ellipse_cover(xs, ys, centre, (spec.iris_radius * 0.4,) * 2), (0.03, 0.03, 0.03))
    paint(canvas, _ellipse_cover(xs, ys, spec.mouth_center, spec.mouth_radii), spec.lips)
    inner = (spec.mouth_radii[0] * 0.7, spec.mouth_radii[1] * 0.25)
    paint(canvas, _ellipse_cover(xs, ys, spec.mouth_center, inner), np.asarray(spec.lips) * 0.35)
    img = canvas.reshape(s, SUPERSAMPLE, s, SUPERSAMPLE, 3).mean(axis=(1, 3))
    img += spec.grain * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), toy_landmarks(spec)


def generate_toy_face(spec):
    return render_toy_face(spec)


def render_generated_face(spec, smoothing=DONOR_SMOOTHING):
    """A toy face as a face-swap generator would emit it: no sensor grain, slightly soft."""
    img, lm = render_toy_face(replace(spec, grain=0.0))
    if smoothing > 0:
        img = gaussian_filter(img, sigma=(smoothing, smoothing, 0), mode="nearest")
    return img, lm


def upsampling_trace(shape, amplitude=DONOR_CHECKER):
    """Period-2 checkerboard, the artefact strided transposed convolutions leave."""
    ii, jj = np.indices(shape[:2])
    return amplitude * np.where((ii + jj) % 2, 1.0, -1.0)[..., None]


def feature_ellipses(spec):
    """Named ellipses (centre, radii) as drawn; used by geometric checks."""
    left, right = eye_centers(spec)
    return {
        "face": (spec.face_center, spec.face_radii),
        "left_eye": (left, spec.eye_radii),
        "right_eye": (right, spec.eye_radii),
        "nose": (spec.nose_center, spec.nose_radii),
        "mouth": (spec.mouth_center, spec.mouth_radii),
    }


# ------------------------------------------------------------------ datasets

@dataclass
class FaceDataset:
    """In-memory images, landmarks, categories and (forgery) masks."""

    images: np.ndarray  # (n, H, W, 3)
    landmarks: np.ndarray  # (n, 68, 2)
    categories: list
    masks: list  # per sample: (H, W) array or None
    meta: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.landmarks) == len(self.categories) == len(self.masks) == n):
            raise ValueError("dataset fields have inconsistent lengths")
        for i, (cat, m) in enumerate(zip(self.categories, self.masks)):
            if cat not in (PRISTINE, DATASET_FORGERY):
                raise ManifestError(f"sample {i}: category must be pristine or dataset_forgery, got {cat!r}")
            if (m is not None) != (cat == DATASET_FORGERY):
                raise ManifestError(f"sample {i}: a ground-truth mask is required exactly for dataset forgeries")
        if not self.meta:
            self.meta = [{} for _ in range(n)]

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self):
        return self.images.shape[1]

    @property
    def pristine_indices(self):
        return np.array([i for i, c in enumerate(self.categories) if c == PRISTINE], dtype=np.intp)

    @property
    def forgery_indices(self):
        return np.array([i for i, c in enumerate(self.categories) if c == DATASET_FORGERY], dtype=np.intp)

    @property
    def labels(self):
        return np.array([int(c == DATASET_FORGERY) for c in self.categories])

    def subset(self, idx):
        return FaceDataset(self.images[idx], self.landmarks[idx], [self.categories[i] for i in idx],
                           [self.masks[i] for i in idx], [self.meta[i] for i in idx])

    @classmethod
    def from_manifest(cls, path):
        records = load_manifest(path)
        root = Path(path).parent
        images, lms, cats, masks, meta = [], [], [], [], []
        for rec in records:
            img, lm, mask = load_sample(rec, root)
            images.append(img)
            lms.append(lm)
            cats.append(rec["category"])
            masks.append(mask)
            meta.append(rec)
        return cls(np.stack(images), np.stack(lms), cats, masks, meta)


def splice_forgery(target, lm_target, donor, lm_donor, region, rng):
    """Offline dataset-style forgery: alpha splice of one donor region."""
    return synthesize(target, lm_target, donor, lm_donor, ForgeryConfig(region, BlendType.ALPHA), rng)


def generate_toy_dataset(n_pristine, n_forgery, seed, out_dir=None, size=64):
    """Toy pristines plus alpha-spliced forgeries with saved masks.

    Forgery donors come from :func:`render_generated_face`, so each splice
    carries a grain mismatch against its host. The pasted area also gets a
    faint period-2 checkerboard, the toy stand-in for the upsampling traces
    real face-swap content leaves.

    Faces are quantised to 8 bits so the in-memory arrays equal what the PNG
    codec reproduces. Returns ``(FaceDataset, manifest_path or None)``.
    """
    if n_pristine <= 0 or n_forgery <= 0:
        raise ValueError("need at least one pristine and one forgery")
    images, lms, cats, masks, meta = [], [], [], [], []
    for i in range(n_pristine):
        img, lm = render_toy_face(ToyFaceSpec.random(derive_seed(seed, "pristine", i), size))
        images.append(quantize(img))
        lms.append(lm)
        cats.append(PRISTINE)
        masks.append(None)
        meta.append({})
    for i in range(n_forgery):
        rng = np.random.default_rng(derive_seed(seed, "forgery", i))
        target, lm_t = render_toy_face(ToyFaceSpec.random(derive_seed(seed, "forgery-target", i), size))
        donor, lm_d = render_generated_face(ToyFaceSpec.random(derive_seed(seed, "forgery-donor", i), size))
        region = int(rng.integers(N_REGIONS))
        fake, mask = splice_forgery(quantize(target), lm_t, quantize(donor), lm_d, region, rng)
        # the generator renders in the target's frame, so its trace is not resampled
        fake = np.clip(fake + mask[..., None] * upsampling_trace(fake.shape), 0.0, 1.0)
        images.append(quantize(fake))
        lms.append(lm_t)
        cats.append(DATASET_FORGERY)
        masks.append(quantize(mask))
        meta.append({"region": region, "blend": "alpha"})
    dataset = FaceDataset(np.stack(images), np.stack(lms), cats, masks, meta)
    path = write_dataset(dataset, out_dir) if out_dir is not None else None
    return dataset, path


def write_dataset(dataset, out_dir, extra=None):
    """Write PNGs, landmark files and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("images", "landmarks", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(len(dataset)):
        rec = {"image_path": f"images/{i:05d}.png", "landmark_path": f"landmarks/{i:05d}.txt",
               "category": dataset.categories[i]}
        save_image_png(out / rec["image_path"], dataset.images[i])
        save_landmarks(out / rec["landmark_path"], dataset.landmarks[i])
        if dataset.masks[i] is not None:
            rec["gt_mask_path"] = f"masks/{i:05d}.png"
            save_mask_png(out / rec["gt_mask_path"], dataset.masks[i])
        for k, v in (dataset.meta[i] or {}).items():
            if k not in rec and k not in ("image_path", "landmark_path", "gt_mask_path"):
                rec[k] = v
        if extra:
            rec.update(extra[i])
        records.append(rec)
    path = out / "manifest.jsonl"
    save_manifest(path, records)
    return path


# ------------------------------------------------------------------ manifests

def save_manifest(path, records):
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def validate_record(rec, where="record"):
    if not isinstance(rec, dict):
        raise ManifestError(f"{where}: expected an object")
    for key in ("image_path", "landmark_path", "category"):
        if not isinstance(rec.get(key), str):
            raise ManifestError(f"{where}: field {key!r} is missing or not a string")
    cat = rec["category"]
    if cat not in (PRISTINE, DATASET_FORGERY):
        raise ManifestError(f"{where}: field 'category' must be pristine or dataset_forgery, got {cat!r}")
    has_mask = "gt_mask_path" in rec
    if cat == PRISTINE and has_mask:
        raise ManifestError(f"{where}: field 'gt_mask_path' is not allowed on a pristine record")
    if cat == DATASET_FORGERY and not isinstance(rec.get("gt_mask_path"), str):
        raise ManifestError(f"{where}: field 'gt_mask_path' is required for a dataset forgery")
    return rec


def load_manifest(path):
    """Parse and validate a manifest; returns the list of sample records."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        docs = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    header = docs[0]
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: missing manifest header")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.get('version')!r}")
    return [validate_record(rec, f"{path}:{i + 2}") for i, rec in enumerate(docs[1:])]


def load_sample(record, root="."):
    """Return ``(image, landmarks, mask or None)`` for one manifest record."""
    record = validate_record(record)
    root = Path(root)
    img = load_image_png(root / record["image_path"])
    lm = load_landmarks(root / record["landmark_path"])
    mask = None
    if record["category"] == DATASET_FORGERY:
        mask_path = root / record["gt_mask_path"]
        if not mask_path.exists():
            raise ManifestError(f"missing ground-truth mask {mask_path}")
        mask = load_mask_png(mask_path)
        if mask.shape != img.shape[:2]:
            raise ManifestError(f"{mask_path}: mask shape {mask.shape} does not match image {img.shape[:2]}")
    return img, lm, mask


def manifest_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
