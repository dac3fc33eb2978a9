"""Diffusion-based multimodal trajectory prediction with learned scenario context."""

__version__ = "0.1.0"
