"""Desk-scale text-driven HDR panorama synthesis.

Two-stage pipeline: dual-codebook autoregressive LDR panorama generation with
spherical positional encoding, followed by joint super-resolution inverse
tone mapping over structured latent codes anchored to the sphere.
"""

__version__ = "0.1.0"
