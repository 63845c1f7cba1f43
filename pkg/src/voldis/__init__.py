"""Volumetric foreground/background disentanglement and editing of radiance fields."""

__version__ = "0.1.0"
