"""melab: a desk-scale lab for mutual-exclusivity experiments with
visually grounded speech models on synthetic word--image data."""

__version__ = "0.1.0"
