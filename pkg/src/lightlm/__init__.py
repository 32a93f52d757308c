"""lightlm: desk-scale weight-tied, factorized and distilled encoder toolkit."""

__version__ = "0.1.0"
