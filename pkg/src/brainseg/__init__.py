"""Numpy U-Net toolkit for brain tissue segmentation with training-data selection."""

__version__ = "0.1.0"
