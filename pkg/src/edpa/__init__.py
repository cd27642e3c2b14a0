"""Embedding-disruption patch attacks and adversarial fine-tuning on toy encoders."""

__version__ = "0.1.0"
