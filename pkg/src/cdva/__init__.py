"""Compact descriptors for video analysis: extraction, coding and matching."""

__version__ = "0.1.0"
