import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import binary_dilation

from forgeaug import masks
from forgeaug.data import ToyFaceSpec, toy_landmarks
from forgeaug.geometry import rasterize_region

unit_masks = arrays(np.float64, st.tuples(st.integers(1, 24), st.integers(1, 24)), elements=st.floats(0, 1))


def blur_oracle(m, k):
    """Dense 2-D convolution with the outer-product kernel and edge padding."""
    g = masks.gaussian_kernel(k)
    k2 = np.outer(g, g)
    r = k // 2
    p = np.pad(m, r, mode="edge")
    out = np.zeros_like(m)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            out[i, j] = np.sum(p[i:i + k, j:j + k] * k2)
    return out


def random_region_mask(rng):
    lm = toy_landmarks(ToyFaceSpec.random(int(rng.integers(1 << 30))))
    return rasterize_region(lm, int(rng.integers(10)), 64, 64)


# ------------------------------------------------------------------- deform

def test_deform_zero_magnitude_unchanged(rng):
    m = random_region_mask(rng)
    assert np.array_equal(masks.deform_mask(m, rng, 0.0), m)


@pytest.mark.parametrize("mag", [0.5, 2.0, 6.0])
def test_deform_empty_mask_stays_empty(rng, mag):
    assert not masks.deform_mask(np.zeros((32, 32)), rng, mag).any()


def test_deform_negative_magnitude_raises(rng):
    with pytest.raises(ValueError):
        masks.deform_mask(np.zeros((8, 8)), rng, -1.0)


def test_deform_support_containment():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = random_region_mask(rng)
        mag = float(rng.uniform(0.5, 6.0))
        out = masks.deform_mask(m, rng, mag)
        k = int(np.ceil(mag))
        allowed = binary_dilation(m > 0, structure=np.ones((2 * k + 1, 2 * k + 1), bool))
        assert not np.any((out > 0) & ~allowed)
        assert out.min() >= 0 and out.max() <= 1


def test_deform_actually_moves_the_contour(rng):
    m = random_region_mask(rng)
    assert not np.array_equal(masks.deform_mask(m, rng, 3.0), m)


def test_deform_deterministic():
    m = random_region_mask(np.random.default_rng(5))
    a = masks.deform_mask(m, np.random.default_rng(9), 2.0)
    b = masks.deform_mask(m, np.random.default_rng(9), 2.0)
    assert np.array_equal(a, b)


def test_displacement_bounded(rng):
    f = masks.displacement_field((64, 64), rng, 2.5)
    assert f.shape == (2, 64, 64)
    assert np.abs(f).max() <= 2.5


# --------------------------------------------------------------------- blur

def test_blur_kernel_one_is_identity(rng):
    m = rng.uniform(size=(10, 12))
    assert np.array_equal(masks.blur_mask(m, 1), m)


@pytest.mark.parametrize("k", masks.BLUR_KERNELS)
def test_blur_constant_unchanged(k):
    m = np.full((15, 15), 0.3)
    assert np.max(np.abs(masks.blur_mask(m, k) - m)) < 1e-15


@pytest.mark.parametrize("k", masks.BLUR_KERNELS)
def test_blur_matches_dense_convolution(rng, k):
    m = rng.uniform(size=(20, 17))
    assert np.max(np.abs(masks.blur_mask(m, k) - blur_oracle(m, k))) < 1e-10


@pytest.mark.parametrize("k", [0, 2, 4, -3])
def test_blur_even_kernel_raises(k):
    with pytest.raises(ValueError):
        masks.blur_mask(np.zeros((5, 5)), k)


def test_blur_sigma_rule():
    k = masks.gaussian_kernel(9)
    r = np.arange(9) - 4
    ref = np.exp(-0.5 * (r / 1.5) ** 2)
    assert np.allclose(k, ref / ref.sum(), atol=1e-15)


def test_blur_preserves_interior_mass(rng):
    m = np.zeros((40, 40))
    m[15:25, 12:28] = rng.uniform(size=(10, 16))
    for k in masks.BLUR_KERNELS:
        assert abs(masks.blur_mask(m, k).sum() - m.sum()) < 1e-9


def test_random_kernel_drawn_from_set():
    rng = np.random.default_rng(0)
    m = np.zeros((31, 31))
    m[15, 15] = 1.0
    widths = set()
    for _ in range(100):
        out = masks.blur_mask(m, rng=rng)
        widths.add(int((out[15] > 0).sum()))
    assert widths == set(masks.BLUR_KERNELS)


def test_random_kernel_needs_rng():
    with pytest.raises(ValueError):
        masks.blur_mask(np.zeros((4, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 1), st.sampled_from(masks.BLUR_KERNELS))
def test_blur_is_linear(seed, a, k):
    r = np.random.default_rng(seed)
    m1, m2 = r.uniform(size=(12, 12)), r.uniform(size=(12, 12))
    lhs = masks.blur_mask(a * m1 + (1 - a) * m2, k)
    rhs = a * masks.blur_mask(m1, k) + (1 - a) * masks.blur_mask(m2, k)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(unit_masks, st.integers(0, 2 ** 31), st.floats(0, 5))
def test_ops_preserve_unit_range(m, seed, mag):
    r = np.random.default_rng(seed)
    for out in (masks.deform_mask(m, r, mag), masks.blur_mask(m, rng=r)):
        assert out.shape == m.shape
        assert out.min() >= 0 and out.max() <= 1


# --------------------------------------------------------------- downsample

def test_downsample_all_ones():
    assert np.array_equal(masks.downsample_16(np.ones((64, 48))), np.ones((4, 3)))


def test_downsample_single_pixel():
    m = np.zeros((32, 32))
    m[20, 5] = 1.0
    out = masks.downsample_16(m)
    expect = np.zeros((2, 2))
    expect[1, 0] = 1 / 256
    assert np.array_equal(out, expect)


def test_downsample_preserves_mean(rng):
    for _ in range(20):
        m = rng.uniform(size=(64, 64))
        assert abs(masks.downsample_16(m).mean() - m.mean()) < 1e-15


def test_downsample_indivisible_raises():
    with pytest.raises(ValueError):
        masks.downsample_16(np.zeros((30, 32)))


def test_downsample_batched(rng):
    m = rng.uniform(size=(3, 32, 32))
    out = masks.downsample(m)
    assert out.shape == (3, 2, 2)
    assert np.array_equal(out[1], masks.downsample(m[1]))


# ---------------------------------------------------------------------- png

def test_mask_png_round_trip(tmp_path, rng):
    m = np.round(rng.uniform(size=(16, 16)) * 255) / 255
    masks.save_mask_png(tmp_path / "m.png", m)
    assert np.array_equal(masks.load_mask_png(tmp_path / "m.png"), m)


def test_mask_png_corrupt(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"not a png")
    with pytest.raises(ValueError, match="bad.png"):
        masks.load_mask_png(p)


def test_check_mask_range():
    with pytest.raises(ValueError):
        masks.check_mask(np.full((3, 3), 1.5))
