"""Vicinal labels for partially supervised multi-structure segmentation."""

__version__ = "0.1.0"
