"""Masked-diffusion audio-language model at desk scale."""

__version__ = "0.1.0"
