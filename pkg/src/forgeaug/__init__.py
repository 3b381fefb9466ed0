"""Adversarial forgery augmentation for face-forgery detectors."""

__version__ = "0.1.0"
