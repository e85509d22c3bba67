"""Continuous latent chain-of-thought (CODI) vs. explicit CoT-SFT at desk scale."""

__version__ = "0.1.0"
