"""Progressive causal speech enhancement with threshold-driven early exit."""

__version__ = "0.1.0"
