"""One-shot label-only membership inference lab."""

__version__ = "0.1.0"
