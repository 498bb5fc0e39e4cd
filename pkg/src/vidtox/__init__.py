"""Multimodal, multitask toxicity classification for code-mixed video utterances."""

__version__ = "0.1.0"
