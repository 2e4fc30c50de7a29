"""Render-space (2D) and parameter-space (3D) attacks.

All attacks are deterministic given the AttackSpec seed, zero-strength specs
are exact identities, and geometric 2D attacks co-transform the ground-truth
mask.  Differentiable variants of the 2D attacks back the training loop;
JPEG uses a straight-through estimator there.
"""
from __future__ import annotations

import io as _io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import convolve

from . import autodiff as ad
from .autodiff import Tensor
from .core import GaussianCloud
from .errors import BadSpec

KINDS_2D = (
    "noise",
    "jpeg",
    "scale",
    "blur",
    "rotate",
    "translate",
    "cropout",
    "brightness",
    "contrast",
    "perspective",
)
KINDS_3D = ("noise3d", "translate3d", "rotate3d", "cropout3d")

# paper maxima / defaults per kind
PARAM_RANGES = {
    "noise": ("nu", 0.0, 1.0, 0.1),
    "jpeg": ("quality", 1, 100, 40),
    "scale": ("factor", 0.1, 1.0, 0.7),
    "blur": ("sigma", 0.0, 5.0, 0.1),
    "rotate": ("angle", -np.pi / 6, np.pi / 6, np.pi / 6),
    "translate": ("ratio", 0.0, 0.5, 0.2),
    "cropout": ("ratio", 0.0, 0.9, 0.5),
    "brightness": ("shift", -0.5, 0.5, 0.1),
    "contrast": ("factor", 0.5, 2.0, 1.1),
    "perspective": ("jitter", 0.0, 0.2, 0.05),
    "noise3d": ("nu", 0.0, 1.0, 0.1),
    "translate3d": ("ratio", 0.0, 0.5, 0.2),
    "rotate3d": ("angle", -np.pi / 6, np.pi / 6, np.pi / 6),
    "cropout3d": ("ratio", 0.0, 0.9, 0.5),
}

BLUR_KERNEL_SIZE = 3


@dataclass(frozen=True)
class AttackSpec:
    """One attack with its strength parameter and rng seed."""

    kind: str
    strength: float | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS_2D + KINDS_3D:
            raise BadSpec(f"unknown attack kind {self.kind!r}")
        name, lo, hi, default = PARAM_RANGES[self.kind]
        value = default if self.strength is None else self.strength
        if not lo <= value <= hi:
            raise BadSpec(f"{self.kind}: {name}={value} outside [{lo}, {hi}]")
        object.__setattr__(self, "strength", float(value))

    @property
    def is_2d(self) -> bool:
        return self.kind in KINDS_2D

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    """k x k truncated Gaussian, normalized to sum 1."""
    r = (k - 1) / 2.0
    xs = np.arange(k) - r
    if sigma <= 0:
        g = (xs == 0).astype(np.float64)
    else:
        g = np.exp(-0.5 * (xs / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


# ---- warping helpers ----


def _bilinear_weights(coords: np.ndarray, h: int, w: int):
    """Sample plan for coords (..., 2) as (y, x): four corner indices + weights.

    Out-of-bounds samples get zero weight (background fill handled by caller).
    """
    ys = coords[..., 0].ravel()
    xs = coords[..., 1].ravel()
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    idx = np.empty((ys.size, 4), dtype=np.int64)
    wgt = np.empty((ys.size, 4))
    for j, (dy, dx, wv) in enumerate(
        [
            (0, 0, (1 - fy) * (1 - fx)),
            (0, 1, (1 - fy) * fx),
            (1, 0, fy * (1 - fx)),
            (1, 1, fy * fx),
        ]
    ):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx[:, j] = np.where(ok, yy * w + xx, 0)
        wgt[:, j] = np.where(ok, wv, 0.0)
    return idx, wgt


class WarpPlan:
    """Precomputed bilinear warp: linear in the image, hence an exact transpose
    backward."""

    def __init__(self, coords: np.ndarray, h: int, w: int, fill):
        self.h, self.w = h, w
        self.out_shape = coords.shape[:-1]
        self.idx, self.wgt = _bilinear_weights(coords, h, w)
        self.coverage = self.wgt.sum(axis=1).reshape(self.out_shape)
        self.fill = np.asarray(fill, dtype=np.float64)

    def apply(self, img: np.ndarray) -> np.ndarray:
        """img (H, W, C) -> warped (out_shape, C) with background fill."""
        c = img.shape[-1]
        flat = img.reshape(-1, c)
        out = (flat[self.idx] * self.wgt[..., None]).sum(axis=1)
        out = out.reshape(*self.out_shape, c)
        miss = 1.0 - self.coverage
        return out + miss[..., None] * self.fill.reshape(1, 1, -1)

    def apply_transpose(self, grad: np.ndarray) -> np.ndarray:
        """Adjoint of apply (ignoring the constant fill term)."""
        c = grad.shape[-1]
        g = grad.reshape(-1, c)
        out = np.zeros((self.h * self.w, c))
        for j in range(4):
            np.add.at(out, self.idx[:, j], g * self.wgt[:, j : j + 1])
        return out.reshape(self.h, self.w, c)

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        """Warp a binary mask; fill is 0 outside."""
        warped = (mask.reshape(-1)[self.idx] * self.wgt).sum(axis=1)
        return (warped.reshape(self.out_shape) > 0.5).astype(mask.dtype)


def _grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return np.stack([ys, xs], axis=-1)


def rotation_plan(h: int, w: int, angle: float, fill) -> WarpPlan:
    """Inverse-map rotation about the image center."""
    cy, cx = h / 2.0, w / 2.0
    g = _grid(h, w)
    dy = g[..., 0] - cy
    dx = g[..., 1] - cx
    ca, sa = np.cos(angle), np.sin(angle)
    src_y = cy + ca * dy + sa * dx - 0.5
    src_x = cx - sa * dy + ca * dx - 0.5
    return WarpPlan(np.stack([src_y, src_x], axis=-1), h, w, fill)


def translation_plan(h: int, w: int, shift_y: float, shift_x: float, fill) -> WarpPlan:
    g = _grid(h, w)
    coords = np.stack([g[..., 0] - shift_y - 0.5, g[..., 1] - shift_x - 0.5], axis=-1)
    return WarpPlan(coords, h, w, fill)


def _homography_from_corners(src, dst) -> np.ndarray:
    """3x3 homography mapping src corners (y, x) to dst corners."""
    rows = []
    rhs = []
    for (sy, sx), (dy, dx) in zip(src, dst):
        rows.append([sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy])
        rhs.append(dx)
        rows.append([0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy])
        rhs.append(dy)
    sol = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs))
    return np.append(sol, 1.0).reshape(3, 3)


def perspective_plan(h: int, w: int, jitter: float, rng, fill) -> WarpPlan:
    """Corner jitter up to jitter * dim; inverse-mapped for sampling."""
    corners = np.array([[0, 0], [0, w], [h, 0], [h, w]], dtype=np.float64)
    moved = corners + rng.uniform(-jitter, jitter, size=(4, 2)) * np.array([h, w])
    hom = _homography_from_corners(moved, corners)  # dst pixel -> src pixel
    g = _grid(h, w)
    ones = np.ones(g.shape[:-1])
    pts = np.stack([g[..., 1], g[..., 0], ones], axis=-1) @ hom.T
    src_x = pts[..., 0] / pts[..., 2]
    src_y = pts[..., 1] / pts[..., 2]
    return WarpPlan(np.stack([src_y - 0.5, src_x - 0.5], axis=-1), h, w, fill)


def scale_matrices(h: int, w: int, factor: float):
    """Row/column bilinear interpolation matrices for resize to factor and
    back, composed into (H, H) and (W, W) operators."""
    def resize_matrix(n_out, n_in):
        m = np.zeros((n_out, n_in))
        if n_in == 1:
            m[:, 0] = 1.0
            return m
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        m[np.arange(n_out), lo] += 1 - frac
        m[np.arange(n_out), hi] += frac
        return m

    hs = max(1, int(round(h * factor)))
    ws = max(1, int(round(w * factor)))
    row = resize_matrix(h, hs) @ resize_matrix(hs, h)
    col = resize_matrix(w, ws) @ resize_matrix(ws, w)
    return row, col


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Real baseline JPEG encode/decode of an (H, W, 3) image in [0, 1]."""
    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(u8).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf), dtype=np.float64) / 255.0


def _cropout_box(h: int, w: int, ratio: float, rng):
    """Random rectangle with area <= ratio of the image."""
    area = ratio * h * w
    bh = int(np.sqrt(area) * rng.uniform(0.5, 1.0))
    bh = max(1, min(bh, h))
    bw = max(1, min(int(area / max(bh, 1)), w))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return y0, x0, bh, bw


def attack2d(img, spec: AttackSpec, mask: np.ndarray | None = None, background=(1.0, 1.0, 1.0)):
    """Apply one 2D attack to an (H, W, 3) image in [0, 1].

    Geometric attacks transform mask identically.  Returns the attacked image,
    or (image, mask) when a mask is supplied.
    """
    if not spec.is_2d:
        raise BadSpec(f"{spec.kind} is not a 2D attack")
    from .rasterizer import ImageBuffer  # local import avoids a cycle at import time

    alpha = None
    if isinstance(img, ImageBuffer):
        alpha = img.alpha
        img = img.data
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    s = spec.strength
    rng = spec.rng()
    out_mask = mask

    if spec.kind == "noise":
        out = img + rng.normal(0.0, s, size=img.shape) if s > 0 else img
        out = np.clip(out, 0.0, 1.0)
    elif spec.kind == "jpeg":
        out = jpeg_roundtrip(img, int(s))
    elif spec.kind == "scale":
        row, col = scale_matrices(h, w, s)
        out = np.einsum("ij,jkc->ikc", row, np.einsum("jlc,kl->jkc", img, col))
        out = np.clip(out, 0.0, 1.0)
    elif spec.kind == "blur":
        kern = gaussian_kernel(BLUR_KERNEL_SIZE, s)
        out = np.stack(
            [convolve(img[..., c], kern, mode="nearest") for c in range(img.shape[-1])],
            axis=-1,
        )
    elif spec.kind == "brightness":
        out = np.clip(img + s, 0.0, 1.0)
    elif spec.kind == "contrast":
        out = np.clip((img - 0.5) * s + 0.5, 0.0, 1.0)
    elif spec.kind == "cropout":
        out = img.copy()
        if s > 0:
            y0, x0, bh, bw = _cropout_box(h, w, s, rng)
            out[y0 : y0 + bh, x0 : x0 + bw] = np.asarray(background)
            if mask is not None:
                out_mask = mask.copy()
                out_mask[y0 : y0 + bh, x0 : x0 + bw] = 0
    else:  # warp-based geometric attacks
        plan = _warp_plan(spec, h, w, rng, background)
        if plan is None:
            out = img
        else:
            out = np.clip(plan.apply(img), 0.0, 1.0)
            if mask is not None:
                out_mask = plan.apply_mask(np.asarray(mask))

    buf = ImageBuffer(out.astype(np.float32), alpha)
    return buf if mask is None else (buf, out_mask)


def _warp_plan(spec: AttackSpec, h: int, w: int, rng, background):
    s = spec.strength
    if spec.kind == "rotate":
        return rotation_plan(h, w, s, background) if s != 0 else None
    if spec.kind == "translate":
        if s == 0:
            return None
        sy = float(rng.uniform(-s, s)) * h
        sx = float(rng.uniform(-s, s)) * w
        return translation_plan(h, w, sy, sx, background)
    if spec.kind == "perspective":
        return perspective_plan(h, w, s, rng, background) if s != 0 else None
    raise BadSpec(f"no warp plan for {spec.kind}")


# ---- 3D attacks ----


def _scene_scale(cloud: GaussianCloud) -> float:
    return max(float(cloud.bounding_radius()), 1e-6)


def attack3d(cloud: GaussianCloud, spec: AttackSpec) -> GaussianCloud:
    """Apply one parameter-space attack, returning a new cloud."""
    if spec.is_2d:
        raise BadSpec(f"{spec.kind} is not a 3D attack")
    rng = spec.rng()
    s = spec.strength

    if spec.kind == "noise3d":
        if s == 0:
            return cloud
        scale = _scene_scale(cloud)
        positions = cloud.positions + rng.normal(
            0.0, s * scale, size=cloud.positions.shape
        ).astype(np.float32)
        colors = np.clip(
            cloud.colors + rng.normal(0.0, s, size=cloud.colors.shape), 0.0, 1.0
        ).astype(np.float32)
        return cloud.replace(positions=positions, colors=colors)

    if spec.kind == "translate3d":
        if s == 0:
            return cloud
        offset = rng.uniform(-1.0, 1.0, size=3)
        offset *= s * _scene_scale(cloud) / max(np.linalg.norm(offset), 1e-12)
        return cloud.replace(
            positions=(cloud.positions + offset.astype(np.float32))
        )

    if spec.kind == "rotate3d":
        if s == 0:
            return cloud
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        half = s / 2.0
        q = np.array([np.cos(half), *(np.sin(half) * axis)])
        rot = _quat_matrix(q)
        center = cloud.centroid()
        positions = (cloud.positions - center) @ rot.T + center
        rotations = _quat_compose(q, cloud.rotations)
        return cloud.replace(
            positions=positions.astype(np.float32),
            rotations=rotations.astype(np.float32),
        )

    if spec.kind == "cropout3d":
        if s == 0 or cloud.count == 0:
            return cloud
        # grow a random axis-aligned box until it holds <= s of the Gaussians
        target = int(s * cloud.count)
        if target == 0:
            return cloud
        center = cloud.positions[int(rng.integers(0, cloud.count))]
        d = np.abs(cloud.positions - center).max(axis=1)
        half_extent = np.partition(d, target - 1)[target - 1]
        drop = d <= half_extent
        if drop.sum() > target:  # tie at the boundary: trim deterministically
            idx = np.flatnonzero(drop)[np.argsort(d[drop], kind="stable")][:target]
            drop = np.zeros(cloud.count, dtype=bool)
            drop[idx] = True
        return cloud.select(~drop)
    raise BadSpec(f"unhandled 3D kind {spec.kind}")


def _quat_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quat_compose(q, quats):
    """q * quats[i] for every row (Hamilton product, w-first)."""
    w1, x1, y1, z1 = q
    w2, x2, y2, z2 = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=1,
    )


# ---- differentiable train-time variants ----


def _warp_tensor(x: Tensor, plan: WarpPlan) -> Tensor:
    """Apply a WarpPlan to an NCHW tensor via its exact adjoint."""
    b, c, h, w = x.shape
    imgs = x.data.transpose(0, 2, 3, 1)
    out = np.stack([plan.apply(im.astype(np.float64)) for im in imgs])
    out = out.transpose(0, 3, 1, 2).astype(x.data.dtype)

    def backward(g):
        gs = g.transpose(0, 2, 3, 1)
        gx = np.stack([plan.apply_transpose(gi.astype(np.float64)) for gi in gs])
        return (gx.transpose(0, 3, 1, 2).astype(x.data.dtype),)

    return ad.custom_op((x,), out, backward)


_BLUR_WEIGHT_CACHE: dict = {}


def _blur_weight(channels: int, sigma: float, dtype) -> np.ndarray:
    key = (channels, round(sigma, 9), np.dtype(dtype).name)
    if key not in _BLUR_WEIGHT_CACHE:
        kern = gaussian_kernel(BLUR_KERNEL_SIZE, sigma)
        weight = np.zeros(
            (channels, channels, BLUR_KERNEL_SIZE, BLUR_KERNEL_SIZE), dtype=dtype
        )
        for c in range(channels):
            weight[c, c] = kern
        _BLUR_WEIGHT_CACHE[key] = weight
    return _BLUR_WEIGHT_CACHE[key]


def attack2d_differentiable(x: Tensor, spec: AttackSpec, background=(1.0, 1.0, 1.0)) -> Tensor:
    """Differentiable 2D attack on an NCHW tensor in [0, 1].

    Linear/elementwise kinds differentiate exactly; JPEG is straight-through
    (real codec forward, identity backward).
    """
    if not spec.is_2d:
        raise BadSpec(f"{spec.kind} is not a 2D attack")
    b, c, h, w = x.shape
    s = spec.strength
    rng = spec.rng()

    if spec.kind == "noise":
        if s == 0:
            return x
        noise = rng.normal(0.0, s, size=x.shape).astype(x.data.dtype)
        return ad.clamp(x + Tensor(noise), 0.0, 1.0)
    if spec.kind == "brightness":
        return ad.clamp(x + s, 0.0, 1.0) if s != 0 else x
    if spec.kind == "contrast":
        return ad.clamp((x - 0.5) * s + 0.5, 0.0, 1.0) if s != 1 else x
    if spec.kind == "blur":
        weight = _blur_weight(c, s, x.data.dtype)
        return ad.conv2d(x, Tensor(weight), stride=1, pad=BLUR_KERNEL_SIZE // 2)
    if spec.kind == "scale":
        row, col = scale_matrices(h, w, s)
        rt = Tensor(row.astype(x.data.dtype))
        ct = Tensor(col.T.astype(x.data.dtype))
        flat = x.reshape(b * c, h, w)
        resized = ad.matmul(ad.matmul(rt, flat), ct)
        return ad.clamp(resized.reshape(b, c, h, w), 0.0, 1.0)
    if spec.kind in ("rotate", "translate", "perspective"):
        plan = _warp_plan(spec, h, w, rng, background)
        if plan is None:
            return x
        return ad.clamp(_warp_tensor(x, plan), 0.0, 1.0)
    if spec.kind == "cropout":
        if s == 0:
            return x
        y0, x0, bh, bw = _cropout_box(h, w, s, rng)
        keep = np.ones((1, 1, h, w), dtype=x.data.dtype)
        keep[:, :, y0 : y0 + bh, x0 : x0 + bw] = 0.0
        fill = np.zeros((1, c, h, w), dtype=x.data.dtype)
        fill[0, :, y0 : y0 + bh, x0 : x0 + bw] = np.asarray(
            background, dtype=x.data.dtype
        ).reshape(c, 1, 1)
        return x * Tensor(keep) + Tensor(fill)
    if spec.kind == "jpeg":
        out = np.stack(
            [
                jpeg_roundtrip(im.transpose(1, 2, 0), int(s)).transpose(2, 0, 1)
                for im in x.data
            ]
        ).astype(x.data.dtype)
        return ad.custom_op((x,), out, lambda g: (g,))
    raise BadSpec(f"unhandled differentiable kind {spec.kind}")


def paper_attacks_2d(seed: int = 0) -> list[AttackSpec]:
    """The fixed-strength 2D evaluation set."""
    return [
        AttackSpec("noise", 0.1, seed),
        AttackSpec("jpeg", 40, seed),
        AttackSpec("scale", 0.7, seed),
        AttackSpec("blur", 0.1, seed),
        AttackSpec("rotate", np.pi / 6, seed),
        AttackSpec("translate", 0.2, seed),
        AttackSpec("cropout", 0.5, seed),
    ]


def paper_attacks_3d(seed: int = 0) -> list[AttackSpec]:
    """The fixed-strength 3D evaluation set."""
    return [
        AttackSpec("noise3d", 0.1, seed),
        AttackSpec("translate3d", 0.2, seed),
        AttackSpec("rotate3d", np.pi / 6, seed),
        AttackSpec("cropout3d", 0.5, seed),
    ]


def random_train_attack(rng: np.random.Generator) -> AttackSpec:
    """Uniform strength in [0, paper max] over the differentiable 2D kinds."""
    kind = str(
        rng.choice(["noise", "jpeg", "scale", "blur", "rotate", "translate",
                    "cropout", "brightness", "contrast"])
    )
    name, lo, hi, default = PARAM_RANGES[kind]
    if kind == "jpeg":
        strength = float(rng.integers(40, 95))
    elif kind == "scale":
        strength = float(rng.uniform(0.7, 1.0))
    elif kind == "contrast":
        strength = float(rng.uniform(0.9, 1.1))
    elif kind == "rotate":
        strength = float(rng.uniform(-default, default))
    elif kind == "brightness":
        strength = float(rng.uniform(-default, default))
    else:
        strength = float(rng.uniform(0.0, default))
    return AttackSpec(kind, strength, seed=int(rng.integers(0, 2**31)))
