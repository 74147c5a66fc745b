"""Serializable wait-free snapshot reads over an SSI multiversion engine."""

__version__ = "0.1.0"
