"""Attribute unlearning for embedding-based recommenders."""

__version__ = "0.1.0"
