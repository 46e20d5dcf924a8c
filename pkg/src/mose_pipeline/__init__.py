"""Memory-based video object segmentation pipeline at toy scale."""

__version__ = "0.1.0"
