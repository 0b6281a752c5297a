"""Sequence-based network intrusion detection with a from-scratch LSTM."""

__version__ = "0.1.0"
