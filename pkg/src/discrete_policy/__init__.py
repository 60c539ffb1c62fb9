"""Vector-quantized action chunking with conditional latent diffusion, plus a
toy 2D manipulation benchmark and an action-space diffusion baseline."""

__version__ = "0.1.0"
