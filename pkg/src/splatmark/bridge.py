"""Conversion between unstructured clouds and Splatter Image grids.

Orbit camera generation, Plücker ray maps, the 9-channel feature map, and a
deterministic dominant-Gaussian assignment from cloud to grid.  The inverse
direction is core.flatten.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CH_COLOR,
    CH_OPACITY,
    CH_POSITION,
    CH_ROTATION,
    CH_SCALE,
    NUM_CHANNELS,
    Camera,
    GaussianCloud,
    SplatterImage,
)
from .errors import EmptyCameraSet, ShapeMismatch
from .rasterizer import NONE_INDEX, ImageBuffer, dominant_map

# Focal length as a fraction of the image size; a unit object at the default
# orbit radius then covers most of the frame without clipping.
FOCAL_FACTOR = 0.7
DEFAULT_RADIUS_FACTOR = 2.0
PLACEHOLDER_SCALE = 1e-3


@dataclass
class RayMap:
    """Per-pixel ray origins and unit directions in world coordinates."""

    origins: np.ndarray  # (H, W, 3)
    directions: np.ndarray  # (H, W, 3)


@dataclass
class FeatureMap:
    """H x W x 9 grid: [color, origin x direction, direction]."""

    data: np.ndarray


def look_at_camera(
    eye, target, width: int, height: int, focal: float | None = None, up=(0.0, 1.0, 0.0)
) -> Camera:
    """Camera at eye looking at target; world y-up, camera y-down z-forward."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    if focal is None:
        focal = FOCAL_FACTOR * max(width, height)
    return Camera(
        fx=focal,
        fy=focal,
        cx=width / 2.0,
        cy=height / 2.0,
        rotation=rot,
        translation=-rot @ eye,
        width=width,
        height=height,
    )


def orbit_cameras(
    n: int,
    elevation_deg: float,
    radius: float,
    look_at=(0.0, 0.0, 0.0),
    width: int = 128,
    height: int = 128,
    focal: float | None = None,
    azimuth_offset_deg: float = 0.0,
) -> list[Camera]:
    """n cameras at uniform azimuth spacing 360/n, all looking at look_at."""
    if n < 1:
        raise ValueError("need at least one camera")
    if radius <= 0:
        raise ValueError("radius must be positive")
    look_at = np.asarray(look_at, dtype=np.float64)
    cams = []
    for k in range(n):
        az = np.deg2rad(azimuth_offset_deg + 360.0 * k / n)
        el = np.deg2rad(elevation_deg)
        eye = look_at + radius * np.array(
            [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)]
        )
        cams.append(look_at_camera(eye, look_at, width, height, focal))
    return cams


def ray_map(cam: Camera, height: int | None = None, width: int | None = None) -> RayMap:
    """Back-project every pixel center into a world-space ray."""
    h = cam.height if height is None else height
    w = cam.width if width is None else width
    # when rays are asked at a different grid, scale intrinsics accordingly
    sx = w / cam.width
    sy = h / cam.height
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dx = (xs + 0.5 - cam.cx * sx) / (cam.fx * sx)
    dy = (ys + 0.5 - cam.cy * sy) / (cam.fy * sy)
    dirs_cam = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
    dirs = dirs_cam @ cam.rotation  # R^T applied to each row
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    return RayMap(origins=origins.astype(np.float32), directions=dirs.astype(np.float32))


def feature_map(img: ImageBuffer | np.ndarray, rays: RayMap) -> FeatureMap:
    """Concatenate color, Plücker moment (o x d) and direction per pixel."""
    color = img.data if isinstance(img, ImageBuffer) else np.asarray(img)
    if color.shape[:2] != rays.directions.shape[:2] or color.shape[2] != 3:
        raise ShapeMismatch(
            f"image {color.shape} does not match rays {rays.directions.shape}"
        )
    moment = np.cross(rays.origins, rays.directions)
    data = np.concatenate([color, moment, rays.directions], axis=-1)
    return FeatureMap(data=data.astype(np.float32))


def default_orbit_for_cloud(
    cloud: GaussianCloud,
    n_views: int = 4,
    elevation_deg: float = 0.0,
    grid: int = 128,
    azimuth_offset_deg: float = 0.0,
) -> list[Camera]:
    """Orbit at 1.5x the bounding-sphere radius around the cloud centroid."""
    radius = DEFAULT_RADIUS_FACTOR * max(cloud.bounding_radius(), 1e-3)
    return orbit_cameras(
        n_views,
        elevation_deg,
        radius,
        look_at=cloud.centroid(),
        width=grid,
        height=grid,
        azimuth_offset_deg=azimuth_offset_deg,
    )


def cloud_to_splatter(cloud: GaussianCloud, cameras, height: int, width: int) -> SplatterImage:
    """Deterministic dominant-Gaussian assignment into a V-view grid.

    Each pixel copies the parameters of the Gaussian with maximal compositing
    weight along its ray; pixels without a dominant Gaussian get a
    zero-opacity placeholder at the ray's far point.  A Gaussian claimed by
    multiple pixels has its scale divided by the cube root of its claim
    multiplicity so that re-rendered opacity mass is roughly conserved.
    """
    cameras = list(cameras)
    if not cameras:
        raise EmptyCameraSet("cloud_to_splatter needs at least one camera")
    maps = []
    for cam in cameras:
        if (cam.height, cam.width) != (height, width):
            cam = Camera(
                fx=cam.fx * width / cam.width,
                fy=cam.fy * height / cam.height,
                cx=cam.cx * width / cam.width,
                cy=cam.cy * height / cam.height,
                rotation=cam.rotation,
                translation=cam.translation,
                width=width,
                height=height,
            )
        maps.append((cam, dominant_map(cloud, cam)))

    multiplicity = np.zeros(max(cloud.count, 1), dtype=np.int64)
    for _, dom in maps:
        claimed = dom[dom != NONE_INDEX]
        if claimed.size:
            multiplicity += np.bincount(claimed, minlength=multiplicity.size)

    data = np.zeros((len(cameras), height, width, NUM_CHANNELS), dtype=np.float32)
    far = 2.0 * DEFAULT_RADIUS_FACTOR * max(cloud.bounding_radius(), 1e-3)
    scale_div = np.cbrt(np.maximum(multiplicity, 1.0)).astype(np.float32)
    for v, (cam, dom) in enumerate(maps):
        view = data[v]
        hit = dom != NONE_INDEX
        idx = dom[hit]
        view[..., CH_ROTATION][..., 0] = 1.0  # identity quaternion default
        view[..., CH_SCALE] = PLACEHOLDER_SCALE
        if idx.size:
            view[..., CH_POSITION][hit] = cloud.positions[idx]
            view[..., CH_COLOR][hit] = cloud.colors[idx]
            view[..., CH_OPACITY][hit] = cloud.opacities[idx]
            view[..., CH_ROTATION][hit] = cloud.rotations[idx]
            view[..., CH_SCALE][hit] = cloud.scales[idx] / scale_div[idx][:, None]
        # placeholders along the miss rays
        miss = ~hit
        if miss.any():
            rays = ray_map(cam, height, width)
            view[..., CH_POSITION][miss] = (
                rays.origins[miss] + far * rays.directions[miss]
            )
    return SplatterImage(data)
