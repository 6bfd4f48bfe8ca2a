"""Refined-trajectory distillation engine for conditional diffusion models."""

__version__ = "0.1.0"
