"""Latent-skill wage dynamics: simulation, moments, identification and estimation."""

__version__ = "0.1.0"
