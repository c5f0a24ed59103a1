"""Personalized portrait avatars: pivot-tuned latent manifolds with live control."""

__version__ = "0.1.0"
