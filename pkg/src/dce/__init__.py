"""Frequency-aware expert pools with a learned selector for class-imbalanced domain streams."""

__version__ = "0.1.0"
