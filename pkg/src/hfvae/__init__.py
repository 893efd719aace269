"""Householder-flow VAE for one-shot style transfer at desk scale."""

__version__ = "0.1.0"
