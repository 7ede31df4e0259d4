"""Latent-categories-guided diffusion inpainting at desk scale."""

__version__ = "0.1.0"
