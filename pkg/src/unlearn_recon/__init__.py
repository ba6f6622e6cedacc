"""Reconstructing deleted training samples from exactly-unlearned simple models."""

__version__ = "0.1.0"
