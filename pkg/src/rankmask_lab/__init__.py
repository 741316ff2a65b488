"""Desk-scale lab for learnable passage-mask regularization of retriever-reader models."""

__version__ = "0.1.0"
