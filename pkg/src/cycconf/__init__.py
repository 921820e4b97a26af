"""Temporal cycle confusion as an auxiliary task for robust object detection, at desk scale."""

__version__ = "0.1.0"
