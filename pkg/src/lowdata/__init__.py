"""Fully-connected Feature Refiner heads and online joint distillation for low-data training."""

__version__ = "0.1.0"
