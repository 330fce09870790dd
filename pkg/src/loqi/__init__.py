"""Descriptor distillation and place-recognition evaluation for
low-quality imagery."""

__version__ = "0.1.0"
