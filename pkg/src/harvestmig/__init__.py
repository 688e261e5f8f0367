"""Seasonal harvest labor migration from phone metadata and NDVI phenology."""

__version__ = "0.1.0"

UNLOCATED = -1
