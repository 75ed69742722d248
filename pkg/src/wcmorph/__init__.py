"""Worst-case face morphs against a toy face-recognition system."""

__version__ = "0.1.0"
