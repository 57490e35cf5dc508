"""Diffusion-based adversarial purification for a synthetic lesion-detection task."""

__version__ = "0.1.0"
