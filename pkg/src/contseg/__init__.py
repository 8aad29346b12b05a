"""Continual volumetric segmentation with a frozen shared encoder and per-task decoders."""

__version__ = "0.1.0"
