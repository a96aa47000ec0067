"""Learning-based state observers with certified gain design."""

__version__ = "0.1.0"
