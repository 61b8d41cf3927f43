"""Progressive non-uniform sub-net search and dynamic-width inference."""

__version__ = "0.1.0"
