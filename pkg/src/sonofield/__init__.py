"""Differentiable ultrasound B-mode rendering with a coordinate-network tissue field."""

__version__ = "0.1.0"
