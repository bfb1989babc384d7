"""Phase-partitioned dynamic FC modeling with learned structure selection."""

__version__ = "0.1.0"
