import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgeaug import losses as L
from forgeaug import nn
from forgeaug.config import BlendType
from forgeaug.detector import Detector
from forgeaug.records import LabelBatch, pristine_record, synthesized_record
from conftest import fd_check


def am(cos, y, m=0.35, s=30.0):
    return float(L.am_softmax_loss(np.asarray(cos, float), y, L.AmSoftmaxParams(m, s)).data)


# --------------------------------------------------------------- AM-Softmax

def test_am_symmetric_is_ln2():
    assert abs(am([0.8, 0.8], 0, m=0.0, s=1.0) - np.log(2)) < 1e-15


def test_am_hand_evaluated():
    # -log(e^{30(0.9-0.35)} / (e^{30(0.9-0.35)} + e^{30*0.1})) = log(1 + e^{3 - 16.5})
    expected = np.log1p(np.exp(3.0 - 16.5))
    assert abs(am([0.9, 0.1], 0) - expected) < 1e-15


@pytest.mark.parametrize("y", [0, 1])
def test_am_strictly_increasing_in_margin(y):
    vals = [am([0.3, -0.2], y, m=m) for m in np.linspace(0, 1, 11)]
    assert np.all(np.diff(vals) > 0)


def test_am_from_features_matches_cosines(rng):
    f = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 3))
    y = np.array([0, 2, 1, 2])
    cos = (f / np.linalg.norm(f, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=0, keepdims=True))
    got = L.am_softmax_from_features(f, w, y).data
    assert np.max(np.abs(got - L.am_softmax_loss(cos, y).data)) < 1e-12


def test_am_zero_norm_feature_raises():
    with pytest.raises(ValueError):
        L.am_softmax_from_features(np.zeros((1, 4)), np.ones((4, 2)), [0])


def test_am_bad_label_raises():
    with pytest.raises(ValueError):
        L.am_softmax_loss(np.zeros((2, 2)), [0, 2])


def test_am_gradient_matches_finite_differences(rng):
    f = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 2))
    y = np.array([1, 0, 1])
    ft, wt = nn.Tensor(f, requires_grad=True), nn.Tensor(w, requires_grad=True)
    nn.backward(nn.tsum(L.am_softmax_from_features(ft, wt, y)))

    def value():
        return float(L.am_softmax_from_features(f, w, y).data.sum())

    assert fd_check(value, [f, w], [ft.grad, wt.grad]) < 1e-4


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 1), st.floats(0, 1), st.floats(0.1, 64))
def test_am_nonnegative(c0, c1, y, m, s):
    assert am([c0, c1], y, m, s) >= 0


# ------------------------------------------------------------------ region

def test_region_loss_cases(rng):
    m = rng.uniform(size=(4, 4))
    assert float(L.region_loss(m, m).data) == 0.0
    assert float(L.region_loss(np.zeros((4, 4)), np.ones((4, 4))).data) == 1.0


def test_region_loss_matches_loop(rng):
    a, b = rng.uniform(size=(2, 4, 4))
    ref = sum(abs(a[i, j] - b[i, j]) for i in range(4) for j in range(4)) / 16
    assert abs(float(L.region_loss(a, b).data) - ref) < 1e-15


def test_region_loss_shape_mismatch():
    with pytest.raises(ValueError):
        L.region_loss(np.zeros((4, 4)), np.zeros((2, 2)))


# ------------------------------------------------------------------- ratio

def test_ratio_gate_table():
    for t in range(5):
        a_gt = 0.5 if t == BlendType.MIXUP else None
        got = float(L.ratio_loss(a_gt, 0.3, t).data)
        assert got == (abs(0.5 - 0.3) if t == 2 else 0.0)


def test_ratio_non_mixup_ignores_values():
    assert float(L.ratio_loss(0.9, 0.1, 0).data) == 0.0


def test_ratio_mixup_missing_target_raises():
    with pytest.raises(ValueError):
        L.ratio_loss(None, 0.3, 2)


# ------------------------------------------------------------------- total

def test_weighted_arithmetic():
    b = L.combine(1.0, 1.0, 1.0, 1.0, L.LossWeights(0.1, 0.05, 0.1))
    assert abs(float(b.total.data) - 1.25) < 1e-15
    assert float(L.combine(0.0, 0.0, 0.0, 0.0).total.data) == 0.0


def test_total_linear_in_weights(rng):
    comps = rng.uniform(size=4)
    w1, w2 = rng.uniform(size=(2, 3))
    t = lambda w: float(L.combine(*comps, L.LossWeights(*w)).total.data)  # noqa: E731
    assert abs(t(w1 + w2) - (t(w1) + t(w2) - comps[0])) < 1e-12


def test_total_loss_breakdown_sums(rng):
    det = Detector(seed=0)
    x = rng.uniform(size=(3, 64, 64, 3))
    mask = np.zeros((64, 64))
    mask[16:40, 20:44] = 1.0
    recs = [pristine_record(x[0], (4, 4)), synthesized_record(x[1], BlendType.MIXUP, mask, 0.4),
            synthesized_record(x[2], BlendType.ALPHA, mask, 0.5)]
    labels = LabelBatch.from_records(recs)
    w = L.LossWeights()
    b = L.total_loss(labels, det.forward(x), w)
    recomputed = b.main.data + w.alpha * b.region.data + w.mu * b.type.data + w.gamma * b.ratio.data
    assert np.max(np.abs(b.total.data - recomputed)) < 1e-12
    assert b.ratio.data[0] == 0.0 and b.ratio.data[2] == 0.0 and b.ratio.data[1] > 0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        L.LossWeights(alpha=-0.1)
    with pytest.raises(ValueError):
        L.AmSoftmaxParams(margin=-1)
