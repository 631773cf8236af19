"""Hypernetwork-generated activation steering for a frozen tiny language model."""

__version__ = "0.1.0"
