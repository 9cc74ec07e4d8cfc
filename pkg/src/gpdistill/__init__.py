"""Uncertainty-aware discovery of hyperelastic constitutive models."""

__version__ = "0.1.0"
