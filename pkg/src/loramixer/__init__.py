"""Routed mixtures of low-rank experts over a frozen base, on a small numpy autodiff engine."""

__version__ = "0.1.0"
