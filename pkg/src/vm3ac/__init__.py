"""Mutual-information-regularized multi-agent actor-critic with a shared latent variable."""

__version__ = "0.1.0"
