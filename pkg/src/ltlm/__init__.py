"""Lattice rescoring toolkit built around a non-autoregressive Lattice Transformer LM."""

__version__ = "0.1.0"
