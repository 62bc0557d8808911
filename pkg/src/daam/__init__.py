"""Desk-scale domain-adaptive attention network for cross-domain retrieval."""

__version__ = "0.1.0"
