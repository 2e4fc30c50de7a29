"""Losses, synthetic scenes, metrics, the training loop, and evaluation.

Training wires the whole chain end to end: bridge a scene into a Splatter
Image, embed a random message, modulate by the uncertainty heatmap, flatten,
render novel views through a differentiable-attack layer, and extract.  A
second supervision path feeds the watermarked color slice directly to the
extractor (model-parameter extraction).
"""
from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from . import augment as ag
from . import autodiff as ad
from . import bridge, gup, nn, rasterizer
from .autodiff import Tensor
from .core import GaussianCloud, SplatterImage, WatermarkMessage, flatten
from .errors import DimMismatch, NonFiniteLoss, ShapeMismatch

PSNR_INF = float("inf")
BCE_CLAMP = 1e-7


@dataclass
class RunConfig:
    """Hyperparameters for training and evaluation."""

    n_bits: int = 16
    views: int = 4
    grid: int = 64
    render_size: int = 128
    novel_views: int = 4
    alpha: float = 0.15
    eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr_start: float = 1e-5
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    warmup_epochs: int = 5
    epochs: int = 30
    weight_decay: float = 1e-4
    n_scenes: int = 200
    attack_prob: float = 0.5
    attack_start_epoch: int = 3
    seed: int = 0
    early_stop_bit_acc: float = 97.0
    out_dir: str = "runs/toy"

    def __post_init__(self):
        for name in ("n_bits", "views", "grid", "render_size", "novel_views",
                     "epochs", "n_scenes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.attack_prob <= 1:
            raise ValueError("attack_prob must be a probability")

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        """Parse a key=value config file (# comments), then apply overrides."""
        values: dict = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = raw
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            if kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)


# ---- synthetic scenes ----

_SHAPE_KINDS = ("ellipsoid", "box", "torus")


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix (columns are the frame axes) to w-first quaternion."""
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
        )
    i = int(np.argmax(np.diag(m)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k]) * 2
    q = np.empty(4)
    q[0] = (m[k, j] - m[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (m[j, i] + m[i, j]) / s
    q[1 + k] = (m[k, i] + m[i, k]) / s
    return q


def _frame_from_normal(normals: np.ndarray) -> np.ndarray:
    """Per-row orthonormal frame whose third column is the normal."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(
        np.abs(n[:, [0]]) < 0.9,
        np.array([[1.0, 0.0, 0.0]]),
        np.array([[0.0, 1.0, 0.0]]),
    )
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)  # columns t1, t2, n


def _sample_shell(kind: str, count: int, rng):
    """Surface points and outward normals on a canonical primitive."""
    if kind == "ellipsoid":
        axes = rng.uniform(0.25, 0.7, size=3)
        dirs = rng.normal(size=(count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs * axes
        normals = dirs / axes  # gradient of the implicit surface
        return pts, normals
    if kind == "box":
        half = rng.uniform(0.2, 0.55, size=3)
        face = rng.integers(0, 6, size=count)
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
        normals = np.zeros((count, 3))
        rows = np.arange(count)
        pts[rows, axis] = sign * half[axis]
        normals[rows, axis] = sign
        return pts, normals
    # torus
    major = rng.uniform(0.3, 0.5)
    minor = rng.uniform(0.08, 0.2) * major / 0.5
    u = rng.uniform(0, 2 * np.pi, size=count)
    v = rng.uniform(0, 2 * np.pi, size=count)
    ring = major + minor * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
    normals = np.stack(
        [np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1
    )
    return pts, normals


def make_scene(seed: int) -> GaussianCloud:
    """Procedural object: 3-8 colored primitive shells of surface Gaussians,
    tangent-aligned anisotropic scales, unit bounding sphere, deterministic."""
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(3, 9))
    total = int(rng.integers(2000, 10001))
    counts = rng.multinomial(total - n_shapes, np.ones(n_shapes) / n_shapes) + 1

    positions, rotations, scales, opacities, colors = [], [], [], [], []
    for count in counts:
        kind = _SHAPE_KINDS[int(rng.integers(0, len(_SHAPE_KINDS)))]
        pts, normals = _sample_shell(kind, int(count), rng)
        rot = _random_rotation(rng)
        center = rng.uniform(-0.35, 0.35, size=3)
        pts = pts @ rot.T + center
        normals = normals @ rot.T
        frames = _frame_from_normal(normals)
        quats = np.stack([_matrix_to_quat(f) for f in frames])
        # tangential footprint sized to the shell's sampling density
        extent = np.ptp(pts, axis=0).max()
        t = 2.2 * extent / np.sqrt(count)
        scale = np.column_stack(
            [
                t * rng.uniform(0.7, 1.4, size=count),
                t * rng.uniform(0.7, 1.4, size=count),
                0.1 * t * np.ones(count),
            ]
        )
        base = rng.uniform(0.1, 0.9, size=3)
        col = np.clip(base + rng.normal(0, 0.05, size=(count, 3)), 0.0, 1.0)
        positions.append(pts)
        rotations.append(quats)
        scales.append(scale)
        opacities.append(rng.uniform(0.6, 1.0, size=count))
        colors.append(col)

    positions = np.concatenate(positions)
    positions -= positions.mean(axis=0)
    radius = np.linalg.norm(positions, axis=1).max()
    positions /= radius
    return GaussianCloud(
        positions.astype(np.float32),
        np.concatenate(rotations).astype(np.float32),
        (np.concatenate(scales) / radius).astype(np.float32),
        np.concatenate(opacities).astype(np.float32),
        np.concatenate(colors).astype(np.float32),
    )


def mask_ground_truth(render: rasterizer.ImageBuffer, thresh: float = 0.5) -> np.ndarray:
    """Silhouette mask: accumulated opacity above thresh."""
    return (render.alpha > thresh).astype(np.float32)


# ---- losses ----


def _bce(pred: Tensor, target: np.ndarray) -> Tensor:
    p = ad.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = Tensor(np.asarray(target, dtype=p.data.dtype))
    one = 1.0
    return -(t * ad.log(p) + (one - t) * ad.log(one - p))


def loss_mask(pred_probs, gt_mask) -> Tensor:
    """Mean pixel-wise binary cross-entropy for the detection mask."""
    pred_probs = ad.as_tensor(pred_probs)
    gt_mask = np.asarray(gt_mask)
    if pred_probs.shape != gt_mask.shape:
        raise ShapeMismatch(f"probs {pred_probs.shape} vs mask {gt_mask.shape}")
    return ad.mean(_bce(pred_probs, gt_mask))


def loss_msg(pred_bit_probs, message: WatermarkMessage, gt_mask) -> Tensor:
    """Bit-wise BCE averaged over watermarked pixels; 0 for empty masks.

    pred_bit_probs is (..., N, H, W); gt_mask is (..., H, W).
    """
    pred = ad.as_tensor(pred_bit_probs)
    gt_mask = np.asarray(gt_mask, dtype=np.float64)
    if pred.shape[:-3] != gt_mask.shape[:-2] or pred.shape[-2:] != gt_mask.shape[-2:]:
        raise ShapeMismatch(f"probs {pred.shape} vs mask {gt_mask.shape}")
    n = pred.shape[-3]
    if message.length != n:
        raise ShapeMismatch(f"{n} bit channels for {message.length}-bit message")
    total = gt_mask.sum()
    if total == 0:
        return Tensor(np.zeros(()))
    bits = message.as_array().reshape((1,) * (pred.data.ndim - 3) + (n, 1, 1))
    target = np.broadcast_to(bits, pred.shape)
    weights = np.broadcast_to(
        np.expand_dims(gt_mask, -3), pred.shape
    ).astype(pred.data.dtype)
    per = _bce(pred, target) * Tensor(weights / (total * n))
    return per.sum()


# ---- metrics ----


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


_SSIM_KERNEL = ag.gaussian_kernel(11, 1.5)


def ssim(a, b) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    c1, c2 = 0.01**2, 0.03**2

    def filt(x):
        return np.stack(
            [convolve(x[..., c], _SSIM_KERNEL, mode="nearest") for c in range(x.shape[-1])],
            axis=-1,
        )

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def bit_accuracy(pred_bits, message: WatermarkMessage) -> float:
    pred_bits = np.asarray(pred_bits).reshape(-1)
    truth = np.asarray(message.bits)
    if pred_bits.shape != truth.shape:
        raise DimMismatch(f"{pred_bits.shape} vs {truth.shape}")
    return float((pred_bits == truth).mean() * 100.0)


def mask_iou(pred_mask, gt_mask) -> float:
    pred_mask = np.asarray(pred_mask) > 0.5
    gt_mask = np.asarray(gt_mask) > 0.5
    union = np.logical_or(pred_mask, gt_mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred_mask, gt_mask).sum() / union)


# ---- optimizer ----


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1 - b1**self.t
        bias2 = 1 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / bias1
            vhat = self.v[i] / bias2
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)
            if isinstance(p, nn.Param):
                p.updates += 1


def lr_at_epoch(cfg: RunConfig, epoch: int) -> float:
    """Linear warmup to lr_max over warmup_epochs, then cosine to lr_min."""
    if epoch < cfg.warmup_epochs:
        frac = (epoch + 1) / cfg.warmup_epochs
        return cfg.lr_start + frac * (cfg.lr_max - cfg.lr_start)
    span = max(cfg.epochs - cfg.warmup_epochs, 1)
    frac = (epoch - cfg.warmup_epochs) / span
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + np.cos(np.pi * frac))


# ---- embedding ----


@dataclass
class SceneBundle:
    """Cached per-scene state reused across training steps."""

    cloud: GaussianCloud
    splatter: SplatterImage
    gamma: np.ndarray  # (V, H, W)
    view_cams: list


def prepare_scene(seed: int, cfg: RunConfig) -> SceneBundle:
    cloud = make_scene(seed)
    view_cams = bridge.default_orbit_for_cloud(
        cloud, n_views=cfg.views, grid=cfg.grid
    )
    splatter = bridge.cloud_to_splatter(cloud, view_cams, cfg.grid, cfg.grid)
    u = gup.uncertainty(cloud, view_cams, eps=cfg.eps)
    heat = gup.gup_heatmap(cloud, u, view_cams, alpha_scale=cfg.alpha)
    return SceneBundle(cloud, splatter, heat.gamma, view_cams)


def _color_tensor(splatter: SplatterImage) -> np.ndarray:
    """(V, H, W, 3) color slice as an NCHW array."""
    return np.ascontiguousarray(splatter.colors.transpose(0, 3, 1, 2))


def _position_input(splatter: SplatterImage) -> np.ndarray:
    pos = splatter.positions.transpose(0, 3, 1, 2)
    scale = max(np.abs(pos).max(), 1e-6)
    return np.ascontiguousarray(pos / scale)


def embed_delta(embedder: nn.Embedder, splatter: SplatterImage,
                message: WatermarkMessage) -> Tensor:
    """Bounded color perturbation delta in (-1, 1), NCHW."""
    x_c = Tensor(_color_tensor(splatter).astype(np.float32))
    x_mu = Tensor(_position_input(splatter).astype(np.float32))
    raw = embedder(x_c, x_mu, message)
    # tanh(z) = 2*sigmoid(2z) - 1; keeps delta bounded and zero at zero
    return ad.sigmoid(raw * 2.0) * 2.0 - 1.0


def watermark_splatter(
    embedder: nn.Embedder,
    splatter: SplatterImage,
    gamma: np.ndarray,
    message: WatermarkMessage,
    alpha: float,
) -> SplatterImage:
    """One forward pass: new Splatter Image with watermarked colors."""
    delta = embed_delta(embedder, splatter, message).data.transpose(0, 2, 3, 1)
    colors = gup.modulate(splatter.colors, delta, gamma, alpha)
    return splatter.with_colors(colors)


def render_watermarked(
    colors: Tensor, cloud: GaussianCloud, cams, background=rasterizer.WHITE
):
    """Differentiable renders of the cloud with colors (N, 3) overridden.

    Returns (images Tensor (R, 3, H, W), alphas (R, H, W) ndarray).
    """
    cams = list(cams)
    swapped = cloud.replace(colors=colors.data.astype(np.float32))
    images, alphas = [], []
    for cam in cams:
        img, alpha = rasterizer.render_arrays(swapped, cam, background)
        images.append(img.transpose(2, 0, 1))
        alphas.append(alpha)
    out = np.stack(images).astype(colors.data.dtype)

    def backward(g):
        grad_colors = np.zeros((cloud.count, 3))
        for r, cam in enumerate(cams):
            grad_colors += rasterizer.render_color_backward(
                swapped, cam, np.ascontiguousarray(g[r].transpose(1, 2, 0), dtype=np.float64),
                background,
            )
        return (grad_colors.astype(colors.data.dtype),)

    return ad.custom_op((colors,), out, backward), np.stack(alphas)


def novel_cameras(cloud: GaussianCloud, cfg: RunConfig, rng) -> list:
    """Random orbit cameras at render resolution."""
    radius = bridge.DEFAULT_RADIUS_FACTOR * max(cloud.bounding_radius(), 1e-3)
    cams = []
    for _ in range(cfg.novel_views):
        az = float(rng.uniform(0.0, 360.0))
        el = float(rng.uniform(-20.0, 35.0))
        cams.extend(
            bridge.orbit_cameras(
                1, el, radius, look_at=cloud.centroid(),
                width=cfg.render_size, height=cfg.render_size,
                azimuth_offset_deg=az,
            )
        )
    return cams


# ---- training ----


@dataclass
class StepStats:
    loss: float
    loss_mask: float
    loss_msg: float


def train_step(
    embedder: nn.Embedder,
    extractor: nn.Extractor,
    bundle: SceneBundle,
    cfg: RunConfig,
    rng,
    attack: ag.AttackSpec | None,
) -> Tensor:
    """Build the full differentiable loss for one scene and one message."""
    message = WatermarkMessage.random(cfg.n_bits, rng)
    splat = bundle.splatter
    v, h, w = bundle.gamma.shape

    delta = embed_delta(embedder, splat, message)  # (V, 3, H, W)
    x_c = Tensor(_color_tensor(splat).astype(np.float32))
    gamma = Tensor(bundle.gamma[:, None].astype(np.float32))
    x_w = ad.clamp(x_c + gamma * delta * cfg.alpha, 0.0, 1.0)

    # flatten to per-Gaussian colors (grid order = cloud order)
    colors_flat = x_w.transpose(0, 2, 3, 1).reshape(v * h * w, 3)
    flat_cloud = flatten(splat)

    cams = novel_cameras(bundle.cloud, cfg, rng)
    renders, alphas = render_watermarked(colors_flat, flat_cloud, cams)
    gt_masks = (alphas > 0.5).astype(np.float32)

    if attack is not None:
        if attack.kind in ("rotate", "translate", "perspective"):
            plan = ag._warp_plan(attack, cfg.render_size, cfg.render_size,
                                 attack.rng(), (1.0, 1.0, 1.0))
            if plan is not None:
                gt_masks = np.stack([plan.apply_mask(m) for m in gt_masks])
        elif attack.kind == "cropout":
            y0, x0, bh, bw = ag._cropout_box(
                cfg.render_size, cfg.render_size, attack.strength, attack.rng()
            )
            gt_masks = gt_masks.copy()
            gt_masks[:, y0 : y0 + bh, x0 : x0 + bw] = 0
        renders = ag.attack2d_differentiable(renders, attack)

    out = extractor(renders)  # (R, 1+N, H, W)
    l_mask = loss_mask(out[:, 0], gt_masks)
    l_msg = loss_msg(out[:, 1:], message, gt_masks)

    # model-parameter path: the color slice itself, upsampled to render size
    factor = cfg.render_size // cfg.grid
    slice_in = ad.upsample_nearest(x_w, factor) if factor > 1 else x_w
    slice_mask = (splat.opacities > 0).astype(np.float32)
    if factor > 1:
        slice_mask = slice_mask.repeat(factor, axis=1).repeat(factor, axis=2)
    out_p = extractor(slice_in)
    l_mask = l_mask + loss_mask(out_p[:, 0], slice_mask)
    l_msg = l_msg + loss_msg(out_p[:, 1:], message, slice_mask)

    return cfg.lambda1 * l_mask + cfg.lambda2 * l_msg, l_mask, l_msg


def clean_eval(embedder, extractor, bundles, cfg, rng):
    """Clean bit accuracy and render PSNR over a few scenes."""
    accs, psnrs = [], []
    for bundle in bundles:
        message = WatermarkMessage.random(cfg.n_bits, rng)
        marked = watermark_splatter(
            embedder, bundle.splatter, bundle.gamma, message, cfg.alpha
        )
        clean_cloud = flatten(bundle.splatter)
        marked_cloud = flatten(marked)
        cams = novel_cameras(bundle.cloud, cfg, rng)
        masks, msgs = [], []
        for cam in cams:
            buf = rasterizer.render(marked_cloud, cam)
            clean = rasterizer.render(clean_cloud, cam)
            psnrs.append(psnr(buf.data, clean.data))
            m, p = nn.extract(extractor, buf.data)
            masks.append(m)
            msgs.append(p)
        res = nn.aggregate_message(
            np.concatenate([m.reshape(-1) for m in masks]),
            np.concatenate([p.reshape(-1, cfg.n_bits) for p in msgs]),
        )
        accs.append(bit_accuracy(res.bits, message))
    finite = [p for p in psnrs if p != PSNR_INF]
    return float(np.mean(accs)), float(np.mean(finite)) if finite else PSNR_INF


def train(cfg: RunConfig, log=print) -> Path:
    """Full training loop; returns the path of the final checkpoint."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    embedder, extractor = nn.build_models(cfg.n_bits, seed=cfg.seed)
    opt = AdamW(
        embedder.params() + extractor.params(), weight_decay=cfg.weight_decay
    )
    bundles: dict[int, SceneBundle] = {}
    val_seeds = [10**6 + k for k in range(4)]
    val_bundles = [prepare_scene(s, cfg) for s in val_seeds]
    best_path = out_dir / "checkpoint.mswt"
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(cfg.n_scenes)
        epoch_losses = []
        t0 = time.time()
        for step, scene_idx in enumerate(order):
            seed = cfg.seed * 10_000 + int(scene_idx)
            if seed not in bundles:
                bundles[seed] = prepare_scene(seed, cfg)
            attack = None
            if epoch >= cfg.attack_start_epoch and rng.random() < cfg.attack_prob:
                attack = ag.random_train_attack(rng)
            loss, l_mask, l_msg = train_step(
                embedder, extractor, bundles[seed], cfg, rng, attack
            )
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(
                    f"epoch {epoch} step {step}: loss={float(loss.data)} "
                    f"mask={float(l_mask.data)} msg={float(l_msg.data)}"
                )
            embedder.zero_grad()
            extractor.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
        acc, quality = clean_eval(
            embedder, extractor, val_bundles, cfg, np.random.default_rng(999)
        )
        history.append(
            {
                "epoch": epoch,
                "lr": opt.lr,
                "loss": float(np.mean(epoch_losses)),
                "bit_acc": acc,
                "psnr": quality,
                "seconds": time.time() - t0,
            }
        )
        log(
            f"epoch {epoch:3d} lr {opt.lr:.2e} loss {np.mean(epoch_losses):.4f} "
            f"val bit acc {acc:.2f}% psnr {quality:.2f} dB "
            f"({time.time() - t0:.0f}s)"
        )
        nn.save_models(
            best_path, embedder, extractor,
            extra={"epoch": epoch, "bit_acc": acc, "psnr": quality},
        )
        (out_dir / "history.json").write_text(json.dumps(history, indent=2))
        if acc >= cfg.early_stop_bit_acc and quality >= 32.0:
            log(f"early stop at epoch {epoch}")
            break
    return best_path


# ---- evaluation ----


@dataclass
class EvalRow:
    scene: int
    attack: str
    bit_acc: float
    psnr: float
    ssim: float
    iou: float
    coverage: float
    seconds: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["scene", "attack", "bit_acc", "psnr", "ssim", "iou", "coverage", "seconds"]
        )
        for r in self.rows:
            writer.writerow(
                [r.scene, r.attack, f"{r.bit_acc:.2f}", f"{r.psnr:.2f}",
                 f"{r.ssim:.4f}", f"{r.iou:.4f}", f"{r.coverage:.4f}",
                 f"{r.seconds:.2f}"]
            )
        return buf.getvalue()

    def to_table(self) -> str:
        by_attack: dict[str, list] = {}
        for r in self.rows:
            by_attack.setdefault(r.attack, []).append(r)
        lines = [f"{'attack':<14}{'bit acc %':>10}{'psnr dB':>10}{'ssim':>8}{'iou':>8}"]
        for attack, rows in by_attack.items():
            acc = np.mean([r.bit_acc for r in rows])
            finite = [r.psnr for r in rows if r.psnr != PSNR_INF]
            p = np.mean(finite) if finite else PSNR_INF
            s = np.mean([r.ssim for r in rows])
            i = np.mean([r.iou for r in rows])
            lines.append(f"{attack:<14}{acc:>10.2f}{p:>10.2f}{s:>8.4f}{i:>8.4f}")
        return "\n".join(lines)

    def mean_bit_acc(self, attack: str) -> float:
        rows = [r for r in self.rows if r.attack == attack]
        return float(np.mean([r.bit_acc for r in rows])) if rows else float("nan")


def _extract_views(extractor, images, n_bits):
    masks, msgs = [], []
    for img in images:
        m, p = nn.extract(extractor, img)
        masks.append(m.reshape(-1))
        msgs.append(p.reshape(-1, n_bits))
    return nn.aggregate_message(np.concatenate(masks), np.concatenate(msgs))


def extract_from_params(extractor: nn.Extractor, splatter: SplatterImage,
                        n_bits: int):
    """Model-parameter extraction: run on the color slice directly."""
    imgs = [view for view in splatter.colors]
    return _extract_views(extractor, imgs, n_bits)


def evaluate(
    embedder: nn.Embedder,
    extractor: nn.Extractor,
    cfg: RunConfig,
    scene_seeds,
    attacks2d=None,
    attacks3d=None,
    message: WatermarkMessage | None = None,
) -> EvalReport:
    """Table-style robustness matrix: None + each attack, per scene."""
    attacks2d = list(attacks2d) if attacks2d is not None else []
    attacks3d = list(attacks3d) if attacks3d is not None else []
    report = EvalReport()
    for scene in scene_seeds:
        bundle = prepare_scene(int(scene), cfg)
        msg = message or WatermarkMessage.random(
            cfg.n_bits, np.random.default_rng(int(scene) + 77)
        )
        t0 = time.time()
        marked = watermark_splatter(
            embedder, bundle.splatter, bundle.gamma, msg, cfg.alpha
        )
        embed_time = time.time() - t0
        clean_cloud = flatten(bundle.splatter)
        marked_cloud = flatten(marked)
        cams = bridge.default_orbit_for_cloud(
            bundle.cloud, n_views=4, grid=cfg.render_size
        )
        clean_renders = [rasterizer.render(clean_cloud, cam) for cam in cams]
        marked_renders = [rasterizer.render(marked_cloud, cam) for cam in cams]
        gt_masks = [mask_ground_truth(r) for r in marked_renders]

        def record(name, images, masks, seconds):
            t1 = time.time()
            res = _extract_views(extractor, images, cfg.n_bits)
            quality = np.mean(
                [psnr(w, c.data) for w, c in zip(images, clean_renders)]
            ) if name == "none" else float("nan")
            s_val = np.mean(
                [ssim(w, c.data) for w, c in zip(images, clean_renders)]
            ) if name == "none" else float("nan")
            pred_masks = [
                nn.extract(extractor, img)[0] > 0.5 for img in images
            ]
            iou = float(np.mean([mask_iou(p, g) for p, g in zip(pred_masks, masks)]))
            report.rows.append(
                EvalRow(
                    scene=int(scene),
                    attack=name,
                    bit_acc=bit_accuracy(res.bits, msg),
                    psnr=float(quality),
                    ssim=float(s_val),
                    iou=iou,
                    coverage=res.coverage,
                    seconds=seconds + (time.time() - t1),
                )
            )

        record("none", [r.data for r in marked_renders], gt_masks, embed_time)
        for spec in attacks2d:
            images, masks = [], []
            for r, g in zip(marked_renders, gt_masks):
                out = ag.attack2d(r, spec, mask=g)
                images.append(out[0].data)
                masks.append(out[1])
            record(spec.kind, images, masks, 0.0)
        for spec in attacks3d:
            attacked = ag.attack3d(marked_cloud, spec)
            a_cams = bridge.default_orbit_for_cloud(
                attacked, n_views=4, grid=cfg.render_size
            )
            renders = [rasterizer.render(attacked, cam) for cam in a_cams]
            masks = [mask_ground_truth(r) for r in renders]
            record(spec.kind, [r.data for r in renders], masks, 0.0)
    return report
