"""Desk-scale latent diffusion pipeline for agricultural image synthesis."""

__version__ = "0.1.0"
