"""FastAR Lab: fast autoregressive generation in continuous token spaces at desk scale."""

__version__ = "0.1.0"
