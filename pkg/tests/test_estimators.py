import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from forgeaug.estimators import ForgeryDetector, ForgerySynthesizer
from forgeaug.validation import check_binary_labels, check_forgery_masks, check_images, check_landmark_array


def as_arrays(ds):
    return ds.images, ds.labels, ds.landmarks, ds.masks


def test_detector_fit_predict(toy_small):
    X, y, lm, masks = as_arrays(toy_small)
    est = ForgeryDetector(steps=2, batch_size=4, random_state=1).fit(X, y, lm, masks)
    proba = est.predict_proba(X)
    assert proba.shape == (len(X), 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(X)) <= {0, 1}
    margin = est.decision_function(X)
    # the margin and the probability rank samples identically
    assert np.all(np.diff(proba[np.argsort(margin), 1]) >= -1e-12)
    assert len(est.history_) == 2
    assert 0 <= est.score(X, y) <= 1


def test_detector_fit_is_reproducible(toy_small):
    X, y, lm, masks = as_arrays(toy_small)
    a = ForgeryDetector(steps=2, batch_size=4, random_state=3).fit(X, y, lm, masks).decision_function(X)
    b = ForgeryDetector(steps=2, batch_size=4, random_state=3).fit(X, y, lm, masks).decision_function(X)
    assert np.array_equal(a, b)


def test_detector_unfitted():
    with pytest.raises(NotFittedError):
        ForgeryDetector().predict(np.zeros((1, 64, 64, 3)))


def test_detector_get_params():
    est = ForgeryDetector(steps=7)
    assert est.get_params()["steps"] == 7
    assert est.set_params(alpha=0.2).alpha == 0.2


def test_detector_requires_masks(toy_small):
    X, y, lm, _ = as_arrays(toy_small)
    with pytest.raises(ValueError, match="masks"):
        ForgeryDetector(steps=1).fit(X, y, lm)


def test_synthesizer_fixed_config(toy_small):
    X, lm = toy_small.images, toy_small.landmarks
    syn = ForgerySynthesizer(region=7, blend="mixup", ratio=0.5, random_state=0)
    out = syn.fit_transform(X, landmarks=lm)
    assert out.shape == X.shape and out.min() >= 0 and out.max() <= 1
    assert all(c.region == 7 and c.blend.name == "MIXUP" for c in syn.configs_)
    assert all(m.max() > 0 for m in syn.masks_)


def test_synthesizer_random_reproducible(toy_small):
    X, lm = toy_small.images, toy_small.landmarks
    a = ForgerySynthesizer(random_state=4).fit_transform(X, landmarks=lm)
    b = ForgerySynthesizer(random_state=4).fit_transform(X, landmarks=lm)
    assert np.array_equal(a, b)


def test_synthesizer_half_config_rejected(toy_small):
    with pytest.raises(ValueError):
        ForgerySynthesizer(region=2).fit(toy_small.images, landmarks=toy_small.landmarks)


def test_validation_helpers():
    assert check_images(np.zeros((4, 4, 3))).shape == (1, 4, 4, 3)
    with pytest.raises(ValueError):
        check_images(np.ones((1, 4, 4, 3)) * 2)
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 4, 5, 3)))
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 4, 4, 3)), size=8)
    with pytest.raises(ValueError):
        check_binary_labels([0, 2], 2)
    with pytest.raises(ValueError):
        check_landmark_array(np.zeros((2, 5, 2)), 2)
    y = np.array([0, 1])
    assert check_forgery_masks([None, np.zeros((4, 4))], y, (4, 4))[0] is None
    with pytest.raises(ValueError):
        check_forgery_masks([None, None], y, (4, 4))
    with pytest.raises(ValueError):
        check_forgery_masks([None, np.zeros((3, 4))], y, (4, 4))
