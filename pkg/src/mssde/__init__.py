"""Stochastic multiscale latent-SDE surrogates for PDE dynamics."""

__version__ = "0.1.0"
