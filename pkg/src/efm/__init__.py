"""Extended flow matching: matrix fields over time x condition space."""

__version__ = "0.1.0"
