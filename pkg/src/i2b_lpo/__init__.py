"""Latent-branched policy optimization for small verifiable-reward language tasks."""

__version__ = "0.1.0"
