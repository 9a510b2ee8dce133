"""Adversarial-paced learning for few-label salient object segmentation."""

__version__ = "0.1.0"
