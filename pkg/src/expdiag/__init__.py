"""Detection and diagnosis of biased online experiments."""

__version__ = "0.1.0"
