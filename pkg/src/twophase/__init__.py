"""Simulator and lemma checks for label-noise SGD and SAM in two-layer linear networks."""

__version__ = "0.1.0"
