"""Differentiable HOG descriptor toolkit.

Feature extraction expressed as piecewise-differentiable tensor operations,
with gradient-based pre-image reconstruction, pose alignment by descriptor
similarity, and image-comparison metrics.
"""

__version__ = "0.1.0"
