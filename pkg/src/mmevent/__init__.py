"""Multimodal event coreference and joint video/text event extraction."""

__version__ = "0.1.0"
