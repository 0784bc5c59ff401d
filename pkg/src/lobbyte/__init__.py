"""Byte-level hierarchical next-byte modeling of limit order book event streams."""

__version__ = "0.1.0"
