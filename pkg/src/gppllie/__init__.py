"""Perceptual-prior-guided latent-diffusion transformer for low-light image
enhancement, built on a self-contained numpy autodiff engine."""

__version__ = "0.1.0"
