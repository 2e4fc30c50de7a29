"""Binary watermarking for 3D Gaussian Splatting models.

Embeds an N-bit message into a model's color parameters in a single forward
pass, guided by per-Gaussian uncertainty so the change stays imperceptible,
and recovers the message from rendered views (or the parameters themselves)
with a segmentation-based extractor.
"""
from .core import (
    Camera,
    Gaussian3D,
    GaussianCloud,
    SplatterImage,
    WatermarkMessage,
    flatten,
    unflatten,
)
from .errors import SplatmarkError

__all__ = [
    "Camera",
    "Gaussian3D",
    "GaussianCloud",
    "SplatterImage",
    "SplatmarkError",
    "WatermarkMessage",
    "flatten",
    "unflatten",
]

__version__ = "0.1.0"
