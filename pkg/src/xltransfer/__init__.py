"""Intermediate-task transfer for zero-shot cross-lingual evaluation, at desk scale."""

__version__ = "0.1.0"
