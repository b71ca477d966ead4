"""Step-level checking and self-correction toolkit for arithmetic reasoning."""

__version__ = "0.1.0"
