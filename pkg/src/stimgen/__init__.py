"""Controlled synthetic stimulus generation with a VAE/GAN and metric-guided latent search."""

__version__ = "0.1.0"
