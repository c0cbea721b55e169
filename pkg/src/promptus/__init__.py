"""Prompt-conditioned multi-task ultrasound segmentation and classification."""

__version__ = "0.1.0"
