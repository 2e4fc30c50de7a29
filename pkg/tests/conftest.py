"""Shared fixtures and finite-difference oracles for the renderer tests."""
import numpy as np

from splatmark.core import Camera, GaussianCloud

PARAM_FIELDS = ("positions", "colors", "opacities", "scales", "rotations")


def scene_camera(size=32, distance=3.0):
    return Camera(
        fx=0.9 * size,
        fy=0.9 * size,
        cx=size / 2.0,
        cy=size / 2.0,
        rotation=np.eye(3),
        translation=np.array([0.0, 0.0, distance]),
        width=size,
        height=size,
    )


def random_scene(rng, n=16, spread=0.8):
    """Cloud in front of scene_camera() with moderate occlusion."""
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianCloud(
        positions=(rng.uniform(-spread, spread, size=(n, 3))).astype(np.float32),
        rotations=quats.astype(np.float32),
        scales=(0.08 + 0.15 * rng.random((n, 3))).astype(np.float32),
        opacities=(0.2 + 0.75 * rng.random(n)).astype(np.float32),
        colors=rng.random((n, 3)).astype(np.float32),
    )


def perturbed_value(cloud, cam, weights, field, index, coord, delta, render_fn):
    """Loss value sum(weights * image) with one parameter nudged by delta."""
    arr = getattr(cloud, field).copy()
    if arr.ndim == 1:
        arr[index] += delta
    else:
        arr[index, coord] += delta
    moved = cloud.replace(**{field: arr})
    image, _ = render_fn(moved, cam)
    return float((image * weights).sum())


def central_fd(cloud, cam, weights, field, index, coord, h, render_fn):
    fp = perturbed_value(cloud, cam, weights, field, index, coord, +h, render_fn)
    fm = perturbed_value(cloud, cam, weights, field, index, coord, -h, render_fn)
    return (fp - fm) / (2 * h)


def fd_is_smooth(cloud, cam, weights, field, index, coord, h, render_fn, rtol=0.05):
    """Richardson check: finite differences at h and h/2 must agree.

    Gaussians whose footprint sits at the 1/255 skip threshold (or the 0.99
    clip, or a tile boundary) make the render discontinuous in the step size;
    those coordinates are excluded from the gradient comparison.
    """
    d1 = central_fd(cloud, cam, weights, field, index, coord, h, render_fn)
    d2 = central_fd(cloud, cam, weights, field, index, coord, h / 2, render_fn)
    denom = max(abs(d1), abs(d2), 1e-4)
    return abs(d1 - d2) / denom < rtol, d2
