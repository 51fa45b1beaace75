"""Desk-scale self-revision and self-distillation post-training pipeline."""

__version__ = "0.1.0"
