"""Topic-driven, knowledge-aware transformer for dialogue emotion detection."""

__version__ = "0.1.0"
