"""Plan-then-patch manipulation framework on a desk-scale insertion world."""

__version__ = "0.1.0"
