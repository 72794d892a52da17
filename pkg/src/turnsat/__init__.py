"""Turn-level user satisfaction modeling on a synthetic dialogue benchmark."""

__version__ = "0.1.0"
