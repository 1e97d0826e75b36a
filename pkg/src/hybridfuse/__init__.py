"""Spoofed-speech detection by fusing cepstral features with learned frame embeddings."""

__version__ = "0.1.0"
