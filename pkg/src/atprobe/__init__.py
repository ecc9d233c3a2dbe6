"""Atemporal probing of video-language tasks with frozen frame embeddings."""

__version__ = "0.1.0"
