"""Multimodal ensemble training with distillation multiple choice learning."""

__version__ = "0.1.0"
