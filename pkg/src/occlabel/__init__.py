"""Offline dynamic-object labeling for organized LiDAR sequences."""

__version__ = "0.1.0"
