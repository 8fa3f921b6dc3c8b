"""Desk-scale music token language model stack."""

__version__ = "0.1.0"
