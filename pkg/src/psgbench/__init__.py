"""Desk-scale benchmark harness for multimodal PSG self-supervised
pretraining: synthetic cohorts, eight pretraining objectives over a shared
encoder, frozen-encoder task heads, and standardized evaluation protocols."""

__version__ = "0.1.0"
