"""Soft-attention LSTM captioning with beam search and caption metrics."""

__version__ = "0.1.0"
