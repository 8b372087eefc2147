"""Collaborative temporal feature generation for cross-user activity recognition."""

__version__ = "0.1.0"
