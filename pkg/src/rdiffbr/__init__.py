"""Residual diffusion for bundle recommendation under changing bundle-item affiliations."""

__version__ = "0.1.0"
