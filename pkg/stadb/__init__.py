"""Desk-scale person re-identification with self-thresholded attention dropping."""

__version__ = "1.0.0"
