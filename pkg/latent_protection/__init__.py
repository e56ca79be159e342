"""
Latent protection toolkit: consistent-error adversarial protection attacks on a desk-scale
latent diffusion stack, with the dynamics-analysis estimators that explain them.
"""

__version__ = "0.1.0"
