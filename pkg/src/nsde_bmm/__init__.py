"""Neural SDEs with deterministic bidimensional moment matching."""

__version__ = "0.1.0"
