"""scikit-learn style wrappers around the trainer and the synthesizer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .blending import synthesize
from .config import BlendType, ForgeryConfig
from .data import FaceDataset
from .policy import random_config
from .records import DATASET_FORGERY, PRISTINE
from .trainer import TrainConfig, train
from .validation import check_binary_labels, check_forgery_masks, check_images, check_landmark_array


class ForgeryDetector(ClassifierMixin, BaseEstimator):
    """Detector trained with adversarially synthesized forgeries.

    ``fit`` takes images, binary labels (1 = forgery), 68-point landmarks and
    ground-truth masks for the forgeries.
    """

    def __init__(self, steps=2000, batch_size=32, lr_detector=2e-4, lr_policy=5e-5, alpha=0.1, mu=0.05,
                 gamma=0.1, augment="adversarial", random_state=0):
        self.steps = steps
        self.batch_size = batch_size
        self.lr_detector = lr_detector
        self.lr_policy = lr_policy
        self.alpha = alpha
        self.mu = mu
        self.gamma = gamma
        self.augment = augment
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(batch_size=self.batch_size, lr_detector=self.lr_detector, lr_policy=self.lr_policy,
                           alpha=self.alpha, mu=self.mu, gamma=self.gamma, steps=self.steps,
                           seed=int(self.random_state or 0), augment=self.augment)

    def fit(self, X, y, landmarks, masks=None):
        X = check_images(X)
        y = check_binary_labels(y, len(X))
        lm = check_landmark_array(landmarks, len(X))
        masks = check_forgery_masks(masks, y, X.shape[1:3])
        cats = [DATASET_FORGERY if label else PRISTINE for label in y]
        result = train(FaceDataset(X, lm, cats, masks), self._train_config())
        self.detector_ = result.detector
        self.policy_ = result.policy
        self.history_ = result.history
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        """Forgery-minus-pristine logit."""
        check_is_fitted(self, "detector_")
        X = check_images(X, self.detector_.image_size)
        logits = np.concatenate([self.detector_.forward(X[i:i + 64]).main_logits for i in range(0, len(X), 64)])
        return logits[:, 1] - logits[:, 0]

    def predict_proba(self, X):
        check_is_fitted(self, "detector_")
        p = self.detector_.score(check_images(X, self.detector_.image_size))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.intp)


class ForgerySynthesizer(TransformerMixin, BaseEstimator):
    """Turns pristine faces into forgeries using a pool of reference faces.

    With ``region`` and ``blend`` unset every image gets a uniform random
    config (do-nothing excluded); otherwise the fixed config is used.
    """

    def __init__(self, region=None, blend=None, ratio=0.5, random_state=0):
        self.region = region
        self.blend = blend
        self.ratio = ratio
        self.random_state = random_state

    def fit(self, X, y=None, landmarks=None):
        X = check_images(X)
        if landmarks is None:
            raise ValueError("reference landmarks are required")
        self.references_ = X
        self.reference_landmarks_ = check_landmark_array(landmarks, len(X))
        if (self.region is None) != (self.blend is None):
            raise ValueError("set both region and blend, or neither")
        self.config_ = None if self.region is None else ForgeryConfig(self.region, BlendType.parse(self.blend),
                                                                      self.ratio)
        return self

    def transform(self, X, landmarks=None):
        """Forged images; the masks used are kept in ``masks_`` and configs in ``configs_``."""
        check_is_fitted(self, "references_")
        X = check_images(X, self.references_.shape[1])
        if landmarks is None:
            raise ValueError("landmarks of the images to forge are required")
        lm = check_landmark_array(landmarks, len(X))
        rng = np.random.default_rng(self.random_state)
        blends = (BlendType.ALPHA, BlendType.POISSON, BlendType.MIXUP)
        out, self.masks_, self.configs_ = [], [], []
        for img, l in zip(X, lm):
            ref = int(rng.integers(len(self.references_)))
            cfg = self.config_ or random_config(rng, blends)
            if cfg.blend == BlendType.NONE:
                fake, mask = img.copy(), np.zeros(img.shape[:2])
            else:
                fake, mask = synthesize(img, l, self.references_[ref], self.reference_landmarks_[ref], cfg, rng)
            out.append(fake)
            self.masks_.append(mask)
            self.configs_.append(cfg)
        return np.stack(out)

    def fit_transform(self, X, y=None, landmarks=None):
        return self.fit(X, y, landmarks=landmarks).transform(X, landmarks=landmarks)
