"""Diffusion-driven online video scene graph generation at desk scale."""

__version__ = "0.1.0"
