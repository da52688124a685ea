"""Verifiable fixed-point SGD: constraint-grid witnesses, hash-committed
training transcripts, and statistical audit functions over them."""

__version__ = "0.1.0"
