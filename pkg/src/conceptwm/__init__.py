"""conceptwm: concept-bound watermarking for a toy latent diffusion model."""

__version__ = "0.1.0"
