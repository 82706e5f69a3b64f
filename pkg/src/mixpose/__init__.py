"""Mixture-density multi-person keypoint estimation at desk scale."""
__version__ = "0.1.0"
