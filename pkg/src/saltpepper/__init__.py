"""Diffusion-based anatomical landmark detection on few-hot heatmaps.

A conditional denoising chain generates an N-channel landmark heatmap from a
reference image; training combines a clean-target MSE with a spatial-softmax
cross-entropy, and evaluation reports mean radial error and successful
detection rates in millimetres.
"""

__version__ = "0.1.0"
