"""Selective multi-source graph domain adaptation."""

__version__ = "0.1.0"
