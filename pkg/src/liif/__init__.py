"""Continuous image representation: latent-code grid + coordinate MLP."""

__version__ = "0.1.0"
