"""Slide-level PAM50 subtype classification pipeline."""

__version__ = "0.1.0"
