"""Barlow Twins self-supervised learning for audio, sized for a single CPU."""

__version__ = "0.1.0"
