"""Aggregated two-view stereo networks for multi-view depth estimation."""

from atvsnet.geometry import CameraModel, DisparityHypotheses, disparity_planes

__version__ = "0.1.0"

__all__ = ["CameraModel", "DisparityHypotheses", "disparity_planes", "__version__"]
