"""Specialist-to-generalist instruction editing on a procedural shape world."""

__version__ = "0.1.0"
