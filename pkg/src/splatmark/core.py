"""Domain types for 3D Gaussian Splatting models and Splatter Image grids.

All parameters are stored in activated form: opacity after the logistic,
scale after the exponential, color as plain RGB in [0, 1].  Raw logits and
log-scales exist only at the PLY file boundary (see :mod:`splatmark.io`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CountMismatch

# SH degree-0 basis constant: rgb = 0.5 + C0 * f_dc
SH_C0 = 0.28209479177387814

# Channel layout of one Splatter Image pixel.
CH_POSITION = slice(0, 3)
CH_COLOR = slice(3, 6)
CH_OPACITY = 6
CH_ROTATION = slice(7, 11)
CH_SCALE = slice(11, 14)
NUM_CHANNELS = 14

ALLOWED_MESSAGE_LENGTHS = (16, 32, 48)

QUAT_NORM_TOL = 1e-6
QUAT_DEGENERATE = 1e-8


def normalize_quaternion(q):
    """Return a unit quaternion (w, x, y, z); raise on near-zero input."""
    q = np.asarray(q, dtype=np.float32)
    norm = float(np.linalg.norm(q.astype(np.float64)))
    if norm < QUAT_DEGENERATE:
        raise ValueError(f"degenerate quaternion with norm {norm}")
    if abs(norm - 1.0) <= QUAT_NORM_TOL:
        return q
    return (q.astype(np.float64) / norm).astype(np.float32)


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = (float(v) for v in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class Gaussian3D:
    """One 3D Gaussian with activated parameters.

    The quaternion is renormalized on construction; scales must be strictly
    positive, opacity and color components must lie in [0, 1].
    """

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "position", np.asarray(self.position, dtype=np.float32).reshape(3)
        )
        object.__setattr__(
            self,
            "rotation",
            normalize_quaternion(np.asarray(self.rotation, dtype=np.float32).reshape(4)),
        )
        scale = np.asarray(self.scale, dtype=np.float32).reshape(3)
        if not np.all(scale > 0):
            raise ValueError(f"scale components must be > 0, got {scale}")
        object.__setattr__(self, "scale", scale)
        opacity = float(self.opacity)
        if not 0.0 <= opacity <= 1.0:
            raise ValueError(f"opacity must be in [0, 1], got {opacity}")
        object.__setattr__(self, "opacity", opacity)
        color = np.asarray(self.color, dtype=np.float32).reshape(3)
        if not (np.all(color >= 0) and np.all(color <= 1)):
            raise ValueError(f"color components must be in [0, 1], got {color}")
        object.__setattr__(self, "color", color)


def covariance(g: Gaussian3D) -> np.ndarray:
    """3x3 covariance R diag(s)^2 R^T of a Gaussian; symmetric PSD."""
    rot = quaternion_to_matrix(g.rotation)
    sigma = rot @ np.diag(g.scale.astype(np.float64) ** 2) @ rot.T
    return 0.5 * (sigma + sigma.T)


class GaussianCloud:
    """Ordered collection of 3D Gaussians, stored struct-of-arrays.

    Order is significant: it defines the flatten/unflatten bijection with
    Splatter Images.  Instances are treated as immutable; attacks and edits
    construct new clouds.
    """

    __slots__ = ("positions", "rotations", "scales", "opacities", "colors")

    def __init__(self, positions, rotations, scales, opacities, colors):
        self.positions = np.ascontiguousarray(positions, dtype=np.float32).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float32).reshape(n, 4)
        self.scales = np.ascontiguousarray(scales, dtype=np.float32).reshape(n, 3)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float32).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=np.float32).reshape(n, 3)

    @classmethod
    def empty(cls) -> "GaussianCloud":
        z = np.zeros((0, 3), dtype=np.float32)
        return cls(z, np.zeros((0, 4), np.float32), z, np.zeros(0, np.float32), z)

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.array([g.opacity for g in gaussians], dtype=np.float32),
            np.stack([g.color for g in gaussians]),
        )

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i],
            rotation=self.rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
        )

    def replace(self, **kwargs) -> "GaussianCloud":
        fields = {name: getattr(self, name) for name in self.__slots__}
        fields.update(kwargs)
        return GaussianCloud(**fields)

    def select(self, keep) -> "GaussianCloud":
        """New cloud with the rows where keep (boolean or index array) holds."""
        return GaussianCloud(
            self.positions[keep],
            self.rotations[keep],
            self.scales[keep],
            self.opacities[keep],
            self.colors[keep],
        )

    def centroid(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(3, dtype=np.float32)
        return self.positions.mean(axis=0)

    def bounding_radius(self) -> float:
        """Radius of the bounding sphere around the centroid."""
        if self.count == 0:
            return 0.0
        d = np.linalg.norm(self.positions - self.centroid(), axis=1)
        return float(d.max())


class SplatterImage:
    """V x H x W grid of Gaussians, 14 channels per pixel.

    Channel layout: position (3), color (3), opacity (1), rotation (4),
    scale (3).  Bijectively flattenable to a :class:`GaussianCloud` in
    row-major, view-major order.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 4 or data.shape[3] != NUM_CHANNELS:
            raise ValueError(f"expected (V, H, W, {NUM_CHANNELS}) grid, got {data.shape}")
        self.data = data

    @property
    def views(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def positions(self) -> np.ndarray:
        return self.data[..., CH_POSITION]

    @property
    def colors(self) -> np.ndarray:
        return self.data[..., CH_COLOR]

    @property
    def opacities(self) -> np.ndarray:
        return self.data[..., CH_OPACITY]

    @property
    def rotations(self) -> np.ndarray:
        return self.data[..., CH_ROTATION]

    @property
    def scales(self) -> np.ndarray:
        return self.data[..., CH_SCALE]

    def decode_pixel(self, v: int, i: int, j: int) -> Gaussian3D:
        """Decode one pixel into a validated Gaussian (quaternion renormalized)."""
        px = self.data[v, i, j]
        return Gaussian3D(
            position=px[CH_POSITION],
            rotation=px[CH_ROTATION],
            scale=px[CH_SCALE],
            opacity=float(px[CH_OPACITY]),
            color=px[CH_COLOR],
        )

    def with_colors(self, colors) -> "SplatterImage":
        """Copy with only the color channels replaced."""
        colors = np.asarray(colors, dtype=np.float32)
        if colors.shape != self.colors.shape:
            raise ValueError(f"color slice shape {colors.shape} != {self.colors.shape}")
        data = self.data.copy()
        data[..., CH_COLOR] = colors
        return SplatterImage(data)


def flatten(s: SplatterImage) -> GaussianCloud:
    """Flatten a grid to a cloud in row-major, view-major order (bit-exact)."""
    flat = s.data.reshape(-1, NUM_CHANNELS)
    return GaussianCloud(
        positions=flat[:, CH_POSITION],
        rotations=flat[:, CH_ROTATION],
        scales=flat[:, CH_SCALE],
        opacities=flat[:, CH_OPACITY],
        colors=flat[:, CH_COLOR],
    )


def unflatten(c: GaussianCloud, views: int, height: int, width: int) -> SplatterImage:
    """Inverse of :func:`flatten`; raises CountMismatch when sizes disagree."""
    expected = views * height * width
    if c.count != expected:
        raise CountMismatch(
            f"cloud has {c.count} Gaussians, grid {views}x{height}x{width} needs {expected}"
        )
    data = np.empty((expected, NUM_CHANNELS), dtype=np.float32)
    data[:, CH_POSITION] = c.positions
    data[:, CH_COLOR] = c.colors
    data[:, CH_OPACITY] = c.opacities
    data[:, CH_ROTATION] = c.rotations
    data[:, CH_SCALE] = c.scales
    return SplatterImage(data.reshape(views, height, width, NUM_CHANNELS))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera pose.

    Convention: camera x right, y down, z forward (depth positive in front
    of the camera).  Pixel (i, j) samples at (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world-to-camera, 3x3 orthonormal
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal within 1e-6")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Forward (+z) direction in world coordinates."""
        return self.rotation[2]


@dataclass(frozen=True)
class WatermarkMessage:
    """N-bit binary payload."""

    bits: tuple = field(default=())

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("message bits must be 0 or 1")
        if len(bits) not in ALLOWED_MESSAGE_LENGTHS:
            raise ValueError(
                f"message length {len(bits)} not in {ALLOWED_MESSAGE_LENGTHS}"
            )
        object.__setattr__(self, "bits", bits)

    @property
    def length(self) -> int:
        return len(self.bits)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "WatermarkMessage":
        return cls(tuple(int(b) for b in rng.integers(0, 2, size=n)))

    @classmethod
    def from_hex(cls, text: str, n: int) -> "WatermarkMessage":
        value = int(text, 16)
        return cls(tuple((value >> (n - 1 - k)) & 1 for k in range(n)))

    def to_hex(self) -> str:
        value = 0
        for b in self.bits:
            value = (value << 1) | b
        return f"{value:0{(self.length + 3) // 4}x}"

    def complement(self) -> "WatermarkMessage":
        return WatermarkMessage(tuple(1 - b for b in self.bits))

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float32)
