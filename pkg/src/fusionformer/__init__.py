"""Multi-source dialogue transformer with pluggable attention fusion."""

__version__ = "0.1.0"
