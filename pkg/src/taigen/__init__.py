"""Few-step adversarial image generation with a denoising diffusion model."""

__version__ = "0.1.0"
