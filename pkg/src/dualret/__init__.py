"""Dual-encoder dense retrieval at desk scale: numpy encoder, contrastive
training, exact and IVF search, BM25, and IR evaluation."""

__version__ = "0.1.0"
