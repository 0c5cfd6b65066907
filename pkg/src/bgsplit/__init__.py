"""Background splitting for rare-category classification under a dominant background class."""

__version__ = "0.1.0"
