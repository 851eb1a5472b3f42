"""Consistency-regularized and worst-case data augmentation on small image
classifiers, with robustness / invariance evaluation and assumption checks."""

__version__ = "0.1.0"
