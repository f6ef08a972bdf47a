"""Desk-scale non-intrusive load monitoring lab."""

__version__ = "0.1.0"
