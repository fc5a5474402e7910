"""Autoregressive affine flows paired with a learned one-pass reverse model."""

__version__ = "0.1.0"
