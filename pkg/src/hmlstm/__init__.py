"""Hierarchical multiscale LSTM with a from-scratch reverse-mode tape."""

__version__ = "0.1.0"
