"""Desk-scale salient instance segmentation with region feature masking."""

__version__ = "0.1.0"
