"""Desk-scale deep transfer learning toolkit."""

__version__ = "0.1.0"
