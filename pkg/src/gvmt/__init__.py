"""Globally video-guided multimodal translation, desk scale."""

__version__ = "0.1.0"
