"""Anchored stripe self-attention and the GRL restoration network at desk scale."""

__version__ = "0.1.0"
