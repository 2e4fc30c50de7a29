"""Gaussian uncertainty heatmaps and perturbation modulation.

Per-Gaussian uncertainty is the log of the accumulated squared image
gradients (a Fisher-information diagonal) over position, color, opacity and
scale; rotation is deliberately excluded.  Heatmaps are rendered by scalar
splatting at Splatter Image resolution and min-max normalized per view.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianCloud
from .errors import EmptyCameraSet, ShapeMismatch
from .rasterizer import ImageBuffer, fisher_accumulators, render_scalar

DEFAULT_EPS = 1e-8

# accumulator column layout from rasterizer.fisher_accumulators
ACC_POSITION = slice(0, 3)
ACC_COLOR = slice(3, 6)
ACC_OPACITY = 6
ACC_SCALE = slice(7, 10)


@dataclass
class UncertaintyField:
    """Per-Gaussian log-scale uncertainty values."""

    values: np.ndarray
    eps: float


@dataclass
class GUPHeatmap:
    """Per-view H x W weights in [0, 1], aligned with Splatter Image pixels."""

    gamma: np.ndarray  # (V, H, W)
    alpha_scale: float


def hessian_diag(cloud: GaussianCloud, cameras) -> np.ndarray:
    """Sum of squared image partials per Gaussian over all cameras.

    Returns an (N, 10) array with columns position (3), color (3),
    opacity (1), scale (3).  Order-independent up to float reassociation.
    """
    cameras = list(cameras)
    if not cameras:
        raise EmptyCameraSet("hessian_diag needs at least one camera")
    accum = np.zeros((cloud.count, 10))
    for cam in cameras:
        accum += fisher_accumulators(cloud, cam)
    return accum


def uncertainty(cloud: GaussianCloud, cameras, eps: float = DEFAULT_EPS) -> UncertaintyField:
    """U = log(eps + sum of retained-parameter accumulators) per Gaussian."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    accum = hessian_diag(cloud, cameras)
    return UncertaintyField(values=np.log(eps + accum.sum(axis=1)), eps=eps)


def gup_heatmap_view(
    cloud: GaussianCloud, u: UncertaintyField, view_cam: Camera
) -> np.ndarray:
    """One view slice: splat U, then min-max normalize covered pixels to [0, 1].

    Zero-alpha pixels map to 0; a degenerate constant field maps to 1 on
    covered pixels (uniform uncertainty carries no localization signal).
    """
    buf = render_scalar(cloud, u.values, view_cam)
    covered = buf.alpha > 1.0 / 255.0
    gamma = np.zeros_like(buf.data[..., 0])
    if covered.any():
        vals = buf.data[..., 0][covered]
        lo, hi = float(vals.min()), float(vals.max())
        if hi - lo < 1e-12:
            gamma[covered] = 1.0
        else:
            gamma[covered] = (vals - lo) / (hi - lo)
    return gamma


def gup_heatmap(
    cloud: GaussianCloud,
    u: UncertaintyField,
    view_cams,
    alpha_scale: float = 0.15,
) -> GUPHeatmap:
    """Heatmaps for all Splatter Image views."""
    view_cams = list(view_cams)
    if not view_cams:
        raise EmptyCameraSet("gup_heatmap needs at least one view camera")
    gamma = np.stack([gup_heatmap_view(cloud, u, cam) for cam in view_cams])
    return GUPHeatmap(gamma=gamma.astype(np.float32), alpha_scale=alpha_scale)


def modulate(x_color, delta, gamma: GUPHeatmap | np.ndarray, alpha: float):
    """x + alpha * gamma * delta, clamped to [0, 1]; color channels only."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    x_color = np.asarray(x_color, dtype=np.float32)
    delta = np.asarray(delta, dtype=np.float32)
    g = gamma.gamma if isinstance(gamma, GUPHeatmap) else np.asarray(gamma, np.float32)
    if delta.shape != x_color.shape:
        raise ShapeMismatch(f"delta shape {delta.shape} != color {x_color.shape}")
    if g.shape != x_color.shape[:-1]:
        raise ShapeMismatch(f"gamma shape {g.shape} != spatial {x_color.shape[:-1]}")
    out = x_color + alpha * g[..., None] * delta
    return np.clip(out, 0.0, 1.0)
