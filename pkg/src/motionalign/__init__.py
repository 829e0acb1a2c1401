"""Pyramidal motion-language alignment with Shapley-Taylor interaction distillation."""

__version__ = "0.1.0"
