"""Spatial and spectral adversarial attacks against small CNN and ViT classifiers."""

__version__ = "0.1.0"
