"""Desk-scale post-training executor for masked and block diffusion language models."""

__version__ = "0.1.0"
