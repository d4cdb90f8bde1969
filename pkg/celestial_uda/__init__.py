"""Unsupervised domain adaptation for one-stage detectors on synthetic terrain.

Global adversarial alignment, multi-scale Perceptual Consistency and
visual-similarity alignment (instance and feature clustering) around a
small three-scale detector.
"""

__version__ = "0.1.0"
