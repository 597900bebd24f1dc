"""Desk-scale entropy-balanced policy optimization for a toy tool-use world."""

__version__ = "0.1.0"
