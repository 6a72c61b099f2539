"""Deterministic desk-scale simulation of the TOY optimistic blockchain protocol."""

__version__ = "0.1.0"
