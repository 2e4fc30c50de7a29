"""Deterministic tile-based CPU splatting renderer with an analytic backward pass.

The forward pass composites depth-sorted Gaussians front to back per pixel
(16x16 tiles, alpha clipped at 0.99, contributions below 1/255 skipped).
The backward pass returns exact gradients of the compositing equation with
respect to all 14 Gaussian parameters.  Both are bit-deterministic
regardless of the numba thread count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .core import Camera, GaussianCloud
from .errors import CountMismatch

NONE_INDEX = -1

WHITE = np.array([1.0, 1.0, 1.0])


@dataclass
class ImageBuffer:
    """Rendered image: H x W x C data plus accumulated opacity per pixel."""

    data: np.ndarray
    alpha: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class GaussianGradients:
    """Per-Gaussian partials of a scalar loss, same count as the cloud."""

    position: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray

    @classmethod
    def from_packed(cls, grads14: np.ndarray) -> "GaussianGradients":
        return cls(
            position=grads14[:, 0:3].copy(),
            color=grads14[:, 3:6].copy(),
            opacity=grads14[:, 6].copy(),
            scale=grads14[:, 11:14].copy(),
            rotation=grads14[:, 7:11].copy(),
        )


@dataclass
class Projected2D:
    """Screen-space footprint of one Gaussian."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    visible: bool


class _Prepared:
    """Projected per-Gaussian state plus the tile work lists for one view."""

    __slots__ = (
        "cam",
        "mean2d",
        "depth",
        "conic",
        "radius",
        "visible",
        "p_cam",
        "a_mat",
        "b_mat",
        "j_mat",
        "scales",
        "quats",
        "quat_norms",
        "opacity",
        "tile_starts",
        "sorted_gauss",
        "cam_rot",
    )

    def __init__(self, cloud: GaussianCloud, cam: Camera):
        n = cloud.count
        self.cam = cam
        self.cam_rot = np.ascontiguousarray(cam.rotation, dtype=np.float64)
        positions = cloud.positions.astype(np.float64)
        self.quats, self.quat_norms = _normalized_quats(cloud.rotations)
        self.scales = cloud.scales.astype(np.float64)
        self.opacity = cloud.opacities.astype(np.float64)
        self.mean2d = np.zeros((n, 2))
        self.depth = np.zeros(n)
        self.conic = np.zeros((n, 3))
        self.radius = np.zeros(n)
        self.visible = np.zeros(n, dtype=np.bool_)
        self.p_cam = np.zeros((n, 3))
        self.a_mat = np.zeros((n, 2, 3))
        self.b_mat = np.zeros((n, 3, 3))
        self.j_mat = np.zeros((n, 2, 3))
        K.preprocess(
            positions,
            self.quats,
            self.scales,
            self.cam_rot,
            np.ascontiguousarray(cam.translation, dtype=np.float64),
            cam.fx,
            cam.fy,
            cam.cx,
            cam.cy,
            self.mean2d,
            self.depth,
            self.conic,
            self.radius,
            self.visible,
            self.p_cam,
            self.a_mat,
            self.b_mat,
            self.j_mat,
        )
        total = K.count_tile_pairs(
            self.visible, self.mean2d, self.radius, cam.width, cam.height
        )
        pair_tile = np.empty(total, dtype=np.int64)
        pair_gauss = np.empty(total, dtype=np.int64)
        K.fill_tile_pairs(
            self.visible, self.mean2d, self.radius, cam.width, cam.height,
            pair_tile, pair_gauss,
        )
        # depth-ascending order per tile, ties broken by cloud index
        order = np.lexsort((pair_gauss, self.depth[pair_gauss], pair_tile))
        self.sorted_gauss = np.ascontiguousarray(pair_gauss[order])
        tile_sorted = pair_tile[order]
        ntx = (cam.width + K.TILE - 1) // K.TILE
        nty = (cam.height + K.TILE - 1) // K.TILE
        self.tile_starts = np.searchsorted(
            tile_sorted, np.arange(ntx * nty + 1)
        ).astype(np.int64)


def _normalized_quats(quats: np.ndarray):
    q = quats.astype(np.float64)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return q / norms, norms[:, 0]


def project(g, cam: Camera) -> Projected2D:
    """Project one Gaussian to screen space (EWA with 0.3 low-pass dilation)."""
    cloud = GaussianCloud.from_gaussians([g])
    prep = _Prepared(cloud, cam)
    a, b, c = prep.conic[0]
    visible = bool(prep.visible[0])
    if visible:
        det = a * c - b * b
        cov2d = np.array([[c, -b], [-b, a]]) / det
    else:
        cov2d = np.zeros((2, 2))
    return Projected2D(
        mean2d=prep.mean2d[0].copy(),
        cov2d=cov2d,
        depth=float(prep.depth[0]),
        visible=visible,
    )


def _run_forward(prep: _Prepared, values: np.ndarray, bg: np.ndarray):
    cam = prep.cam
    nch = values.shape[1]
    image = np.zeros((cam.height, cam.width, nch))
    alpha = np.zeros((cam.height, cam.width))
    dominant = np.full((cam.height, cam.width), NONE_INDEX, dtype=np.int64)
    dom_weight = np.zeros((cam.height, cam.width))
    K.render_tiles(
        prep.tile_starts,
        prep.sorted_gauss,
        prep.mean2d,
        prep.conic,
        prep.opacity,
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(bg, dtype=np.float64),
        cam.width,
        cam.height,
        image,
        alpha,
        dominant,
        dom_weight,
    )
    return image, alpha, dominant, dom_weight


def render_arrays(cloud: GaussianCloud, cam: Camera, background=WHITE):
    """Forward render returning float64 arrays (image, alpha)."""
    prep = _Prepared(cloud, cam)
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    image, alpha, _, _ = _run_forward(prep, cloud.colors.astype(np.float64), bg)
    return image, alpha


def render(cloud: GaussianCloud, cam: Camera, background=WHITE) -> ImageBuffer:
    """Render RGB over the configured background (default white)."""
    image, alpha = render_arrays(cloud, cam, background)
    return ImageBuffer(image.astype(np.float32), alpha.astype(np.float32))


def render_scalar(cloud: GaussianCloud, values, cam: Camera) -> ImageBuffer:
    """Composite a per-Gaussian scalar instead of color; background 0."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != cloud.count:
        raise CountMismatch(
            f"{values.shape[0]} values for {cloud.count} Gaussians"
        )
    prep = _Prepared(cloud, cam)
    image, alpha, _, _ = _run_forward(prep, values.reshape(-1, 1), np.zeros(1))
    return ImageBuffer(image.astype(np.float32), alpha.astype(np.float32))


def dominant_map(cloud: GaussianCloud, cam: Camera) -> np.ndarray:
    """Per pixel, the index of the Gaussian with maximal compositing weight
    alpha'*T, or NONE_INDEX when every weight is below 1/255."""
    prep = _Prepared(cloud, cam)
    nch = 1
    _, _, dominant, _ = _run_forward(prep, np.zeros((cloud.count, nch)), np.zeros(nch))
    return dominant


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    grad_image: np.ndarray,
    background=WHITE,
    color_only: bool = False,
) -> GaussianGradients:
    """Analytic gradients of render() w.r.t. all Gaussian parameters.

    grad_image must match the render output shape.  The background and the
    visibility test are treated as constants.
    """
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != (cam.height, cam.width, 3):
        raise CountMismatch(
            f"grad image shape {grad_image.shape} != {(cam.height, cam.width, 3)}"
        )
    prep = _Prepared(cloud, cam)
    grads14 = _backward_packed(
        prep, cloud.colors.astype(np.float64), np.asarray(background, dtype=np.float64),
        grad_image, color_only,
    )
    return GaussianGradients.from_packed(grads14)


def _backward_packed(prep, values, bg, grad_image, color_only):
    total = prep.sorted_gauss.shape[0]
    nch = values.shape[1]
    entry_value = np.zeros((total, nch))
    entry_mean = np.zeros((total, 2))
    entry_conic = np.zeros((total, 3))
    entry_opacity = np.zeros(total)
    K.backward_tiles(
        prep.tile_starts,
        prep.sorted_gauss,
        prep.mean2d,
        prep.conic,
        prep.opacity,
        values,
        bg.reshape(-1),
        prep.cam.width,
        prep.cam.height,
        grad_image,
        entry_value,
        entry_mean,
        entry_conic,
        entry_opacity,
        color_only,
    )
    grads14 = np.zeros((prep.visible.shape[0], 14))
    K.reduce_entries(
        prep.tile_starts,
        prep.sorted_gauss,
        entry_value,
        entry_mean,
        entry_conic,
        entry_opacity,
        prep.conic,
        prep.a_mat,
        prep.b_mat,
        prep.j_mat,
        prep.p_cam,
        prep.scales,
        prep.quats,
        prep.cam_rot,
        prep.cam.fx,
        prep.cam.fy,
        grads14,
        color_only,
    )
    # gradient w.r.t. the stored (possibly unnormalized) quaternion
    grads14[:, 7:11] /= prep.quat_norms[:, None]
    return grads14


def render_color_backward(
    cloud: GaussianCloud, cam: Camera, grad_image: np.ndarray, background=WHITE
) -> np.ndarray:
    """Fast path: dL/dcolor only (N x 3), used by the training loop."""
    grads = render_backward(cloud, cam, grad_image, background, color_only=True)
    return grads.color


def fisher_accumulators(cloud: GaussianCloud, cam: Camera, background=WHITE) -> np.ndarray:
    """Per-Gaussian sums over pixels and channels of squared image partials.

    Columns: position (0:3), color (3:6), opacity (6), scale (7:10).
    Rotation is deliberately excluded.
    """
    prep = _Prepared(cloud, cam)
    pos_chain = np.zeros((cloud.count, 3, 5))
    scale_chain = np.zeros((cloud.count, 3, 5))
    K.build_power_chains(
        prep.visible,
        prep.conic,
        prep.a_mat,
        prep.b_mat,
        prep.j_mat,
        prep.p_cam,
        prep.scales,
        prep.quats,
        prep.cam_rot,
        prep.cam.fx,
        prep.cam.fy,
        pos_chain,
        scale_chain,
    )
    total = prep.sorted_gauss.shape[0]
    entry_acc = np.zeros((total, 10))
    K.fisher_tiles(
        prep.tile_starts,
        prep.sorted_gauss,
        prep.mean2d,
        prep.conic,
        prep.opacity,
        cloud.colors.astype(np.float64),
        np.asarray(background, dtype=np.float64).reshape(-1),
        prep.cam.width,
        prep.cam.height,
        pos_chain,
        scale_chain,
        entry_acc,
    )
    accum = np.zeros((cloud.count, 10))
    K.reduce_fisher(prep.sorted_gauss, entry_acc, accum)
    return accum
