"""Embedder and extractor networks on top of the autodiff engine.

The embedder maps the color and position slices of a multi-view Splatter
Image plus an N-bit message to a color perturbation; its final projection
is zero-initialized so a fresh model is an exact no-op.  The extractor is a
small ViT with a pixel decoder producing per-pixel (1 + N) outputs: a
watermark-presence probability and per-bit probabilities.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import WatermarkMessage
from .errors import BadMagic, MessageLengthMismatch, ShapeMismatch, TruncatedFile

CKPT_MAGIC = b"MSWT"
CKPT_VERSION = 1


class Param(Tensor):
    """Learnable tensor; tracks how many optimizer updates it received."""

    __slots__ = ("updates",)

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.updates = 0


class Module:
    """Minimal parameter container with recursive discovery."""

    def named_params(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Param):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{path}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{path}.{i}", item

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def update_count(self) -> int:
        return sum(p.updates for p in self.params())


def _kaiming(rng, fan_in, shape):
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, pad=1, zero_init=False):
        self.stride = stride
        self.pad = pad
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=np.float32)
        else:
            w = _kaiming(rng, c_in * k * k, (c_out, c_in, k, k))
        self.weight = Param(w)
        self.bias = Param(np.zeros(c_out, dtype=np.float32))

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = _kaiming(rng, d_in, (d_in, d_out))
        self.weight = Param(w)
        self.bias = Param(np.zeros(d_out, dtype=np.float32))

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = Param(np.ones(dim, dtype=np.float32))
        self.bias = Param(np.zeros(dim, dtype=np.float32))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class ResBlock(Module):
    def __init__(self, rng, channels):
        self.conv1 = Conv(rng, channels, channels)
        self.conv2 = Conv(rng, channels, channels)

    def __call__(self, x):
        h = ad.relu(self.conv1(x))
        return ad.relu(x + self.conv2(h))


class SelfAttention(Module):
    """Multi-head self-attention over a (B, T, D) token tensor."""

    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise ValueError("dim must divide evenly into heads")
        self.heads = heads
        self.dim = dim
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x):
        b, t, d = x.shape
        h = self.heads
        hd = d // h
        qkv = self.qkv(x)  # (B, T, 3D)
        qkv = qkv.reshape(b, t, 3, h, hd).transpose(2, 0, 3, 1, 4)  # (3, B, H, T, hd)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, -1)
        out = ad.matmul(attn, v)  # (B, H, T, hd)
        out = out.transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.proj(out)


class TransformerBlock(Module):
    def __init__(self, rng, dim, heads, mlp_ratio=4):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(ad.relu(self.fc1(self.norm2(x))))


def adain(f_c: Tensor, f_mu_stats_scale: Tensor, f_mu_stats_shift: Tensor) -> Tensor:
    """Normalize f_c per channel, then apply predicted scale and shift.

    The scale/shift tensors are (B, C, 1, 1) affine parameters produced from
    the geometry branch statistics.
    """
    normed = ad.instance_norm(f_c)
    return normed * f_mu_stats_scale + f_mu_stats_shift


def multiview_attention(block: TransformerBlock, f: Tensor) -> Tensor:
    """Self-attention over tokens concatenated from all views.

    f is (V, C, H, W); tokens from every view form one sequence, so the
    operation is exactly equivariant to view permutations (no cross-view
    positional encoding).
    """
    v, c, h, w = f.shape
    tokens = f.reshape(v, c, h * w).transpose(0, 2, 1).reshape(1, v * h * w, c)
    tokens = block(tokens)
    return tokens.reshape(v, h * w, c).transpose(0, 2, 1).reshape(v, c, h, w)


def _posenc_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2D sin-cos positional encoding, (h*w, dim)."""
    half = dim // 2
    emb_h = _posenc_1d(np.arange(h), half)
    emb_w = _posenc_1d(np.arange(w), dim - half)
    grid = np.concatenate(
        [
            np.repeat(emb_h, w, axis=0),
            np.tile(emb_w, (h, 1)),
        ],
        axis=1,
    )
    return grid.astype(np.float32)


def _posenc_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    half = max(dim // 2, 1)
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = pos[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb[:, :dim]


class AdaINModulator(Module):
    """Produces per-channel scale/shift for AdaIN from geometry features."""

    def __init__(self, rng, channels):
        self.channels = channels
        self.to_scale = Linear(rng, 2 * channels, channels)
        self.to_shift = Linear(rng, 2 * channels, channels)

    def __call__(self, f_mu):
        m, s = ad.instance_stats(f_mu)
        v = f_mu.shape[0]
        stats = ad.concat(
            [m.reshape(v, self.channels), s.reshape(v, self.channels)], axis=1
        )
        scale = 1.0 + self.to_scale(stats).reshape(v, self.channels, 1, 1)
        shift = self.to_shift(stats).reshape(v, self.channels, 1, 1)
        return scale, shift


class Encoder(Module):
    """Residual down-sampling stack: 3 -> w0 -> w1 -> w2 at 1/4 resolution."""

    def __init__(self, rng, widths=(16, 32, 64)):
        w0, w1, w2 = widths
        self.stem = Conv(rng, 3, w0)
        self.res0 = ResBlock(rng, w0)
        self.down1 = Conv(rng, w0, w1, stride=2)
        self.res1 = ResBlock(rng, w1)
        self.down2 = Conv(rng, w1, w2, stride=2)
        self.res2 = ResBlock(rng, w2)

    def __call__(self, x):
        h = self.res0(ad.relu(self.stem(x)))
        h = self.res1(ad.relu(self.down1(h)))
        return self.res2(ad.relu(self.down2(h)))


class Decoder(Module):
    """Residual up-sampling stack back to input resolution, 3-channel output.

    The final projection is zero-initialized: a fresh embedder emits exactly
    delta = 0.
    """

    def __init__(self, rng, widths=(64, 32, 16)):
        w2, w1, w0 = widths
        self.res2 = ResBlock(rng, w2)
        self.up1 = Conv(rng, w2, w1)
        self.res1 = ResBlock(rng, w1)
        self.up0 = Conv(rng, w1, w0)
        self.res0 = ResBlock(rng, w0)
        self.out = Conv(rng, w0, 3, zero_init=True)

    def __call__(self, x):
        h = self.res2(x)
        h = self.res1(ad.relu(self.up1(ad.upsample_nearest(h, 2))))
        h = self.res0(ad.relu(self.up0(ad.upsample_nearest(h, 2))))
        return self.out(h)


class Embedder(Module):
    """Multi-view message embedder operating on Splatter Image slices."""

    def __init__(self, n_bits: int, seed: int = 0, widths=(16, 32, 64), heads=2):
        rng = np.random.default_rng(seed)
        bottleneck = widths[-1]
        self.n_bits = n_bits
        self.enc_color = Encoder(rng, widths)
        self.enc_pos = Encoder(rng, widths)
        self.adain_mod = AdaINModulator(rng, bottleneck)
        self.attn_in = TransformerBlock(rng, bottleneck, heads)
        self.table = Param(
            (rng.normal(size=(n_bits, bottleneck)) / np.sqrt(n_bits)).astype(np.float32)
        )
        self.fuse = Conv(rng, 2 * bottleneck, bottleneck, k=1, pad=0)
        self.attn_out = TransformerBlock(rng, bottleneck, heads)
        self.dec = Decoder(rng, widths[::-1])

    def message_latent(self, message: WatermarkMessage) -> Tensor:
        """Signed sum of table rows: bit 1 adds the row, bit 0 subtracts it."""
        if message.length != self.n_bits:
            raise MessageLengthMismatch(
                f"model expects {self.n_bits} bits, message has {message.length}"
            )
        signs = Tensor((message.as_array() * 2.0 - 1.0).reshape(1, self.n_bits))
        return ad.matmul(signs, self.table)  # (1, bottleneck)

    def __call__(self, x_c, x_mu, message: WatermarkMessage) -> Tensor:
        """x_c, x_mu: (V, 3, H, W) tensors; returns delta with x_c's shape."""
        if x_c.shape != x_mu.shape:
            raise ShapeMismatch(f"color {x_c.shape} vs position {x_mu.shape}")
        f_c = self.enc_color(x_c)
        f_mu = self.enc_pos(x_mu)
        scale, shift = self.adain_mod(f_mu)
        f = adain(f_c, scale, shift)
        f = multiview_attention(self.attn_in, f)
        v, c, h, w = f.shape
        latent = self.message_latent(message)
        latent_map = latent.reshape(1, c, 1, 1) * Tensor(np.ones((v, c, h, w), np.float32))
        f = self.fuse(ad.concat([f, latent_map], axis=1))
        f = multiview_attention(self.attn_out, f)
        return self.dec(f)


class Extractor(Module):
    """ViT-lite encoder + pixel decoder emitting per-pixel (1 + N) outputs."""

    PATCH = 8

    def __init__(self, n_bits: int, seed: int = 1, dim=64, depth=4, heads=4):
        rng = np.random.default_rng(seed)
        self.n_bits = n_bits
        self.dim = dim
        self.patch_embed = Conv(rng, 3, dim, k=self.PATCH, stride=self.PATCH, pad=0)
        self.blocks = [TransformerBlock(rng, dim, heads) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.up1 = Conv(rng, dim, dim)
        self.up2 = Conv(rng, dim, 48)
        self.up3 = Conv(rng, 48, 32)
        self.head = Conv(rng, 32, 1 + n_bits)

    def __call__(self, img: Tensor) -> Tensor:
        """img: (B, 3, H, W) with H, W divisible by 8 -> (B, 1+N, H, W) probs."""
        b, c, h, w = img.shape
        if h % self.PATCH or w % self.PATCH:
            raise ShapeMismatch(f"input dims {h}x{w} not divisible by {self.PATCH}")
        gh, gw = h // self.PATCH, w // self.PATCH
        tokens = self.patch_embed(img).reshape(b, self.dim, gh * gw).transpose(0, 2, 1)
        tokens = tokens + Tensor(_posenc_2d(gh, gw, self.dim)[None])
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        f = tokens.transpose(0, 2, 1).reshape(b, self.dim, gh, gw)
        f = ad.relu(self.up1(ad.upsample_nearest(f, 2)))
        f = ad.relu(self.up2(ad.upsample_nearest(f, 2)))
        f = ad.relu(self.up3(ad.upsample_nearest(f, 2)))
        return ad.sigmoid(self.head(f))


def reflect_pad_to_multiple(img: np.ndarray, multiple: int):
    """Pad (H, W, C) reflectively so both dims divide; returns (img, (H, W))."""
    h, w = img.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return img, (h, w)


def extract(extractor: Extractor, image: np.ndarray):
    """Run the extractor on an (H, W, 3) image in [0, 1].

    Returns (mask_probs (H, W), msg_probs (H, W, N)) as numpy arrays.
    """
    image = np.asarray(image, dtype=np.float32)
    padded, (h, w) = reflect_pad_to_multiple(image, Extractor.PATCH)
    x = Tensor(padded.transpose(2, 0, 1)[None])
    y = extractor(x).data[0]
    mask = y[0, :h, :w]
    msg = y[1:, :h, :w].transpose(1, 2, 0)
    return mask, msg


class ExtractionResult:
    __slots__ = ("bits", "confidence", "coverage", "no_watermark")

    def __init__(self, bits, confidence, coverage, no_watermark):
        self.bits = bits
        self.confidence = confidence
        self.coverage = coverage
        self.no_watermark = no_watermark


def aggregate_message(mask_probs, msg_probs, tau: float = 0.5) -> ExtractionResult:
    """Mask-weighted per-bit majority vote over pixels with mask > tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    mask_probs = np.asarray(mask_probs, dtype=np.float64)
    msg_probs = np.asarray(msg_probs, dtype=np.float64)
    n = msg_probs.shape[-1]
    sel = mask_probs > tau
    coverage = float(sel.mean()) if sel.size else 0.0
    if not sel.any():
        return ExtractionResult(np.zeros(n, dtype=np.int64), 0.0, coverage, True)
    weights = mask_probs[sel]
    scores = (weights[:, None] * msg_probs[sel]).sum(axis=0) / weights.sum()
    bits = (scores > 0.5).astype(np.int64)
    confidence = float(np.abs(2.0 * scores - 1.0).mean())
    return ExtractionResult(bits, confidence, coverage, False)


# ---- checkpoint I/O ----


def save_checkpoint(path, modules: dict, hyper: dict) -> None:
    """MSWT container: magic, version, JSON hyperparameters, named blobs."""
    blob = json.dumps(hyper).encode("utf-8")
    entries = []
    for mod_name, mod in modules.items():
        for name, p in mod.named_params():
            entries.append((f"{mod_name}.{name}", p.data))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, data in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (hyper dict, {name: array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: expected {CKPT_MAGIC!r} magic")
    try:
        version, blen = struct.unpack("<II", raw[4:12])
        hyper = json.loads(raw[12 : 12 + blen].decode("utf-8"))
        off = 12 + blen
        (count,) = struct.unpack("<I", raw[off : off + 4])
        off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", raw[off : off + 4])
            off += 4
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack("<I", raw[off : off + 4])
            off += 4
            shape = struct.unpack(f"<{ndim}I", raw[off : off + 4 * ndim])
            off += 4 * ndim
            size = int(np.prod(shape)) * 4 if ndim else 4
            data = np.frombuffer(raw[off : off + size], dtype="<f4").reshape(shape)
            if data.size * 4 != size:
                raise TruncatedFile(path)
            off += size
            params[name] = data.copy()
    except (struct.error, ValueError) as exc:
        raise TruncatedFile(f"{path}: {exc}") from None
    return hyper, params


def build_models(n_bits: int, seed: int = 0):
    return Embedder(n_bits, seed=seed), Extractor(n_bits, seed=seed + 1)


def save_models(path, embedder: Embedder, extractor: Extractor, extra: dict | None = None):
    hyper = {"n_bits": embedder.n_bits}
    if extra:
        hyper.update(extra)
    save_checkpoint(path, {"embedder": embedder, "extractor": extractor}, hyper)


def load_models(path):
    hyper, params = load_checkpoint(path)
    embedder, extractor = build_models(int(hyper["n_bits"]))
    for mod_name, mod in (("embedder", embedder), ("extractor", extractor)):
        for name, p in mod.named_params():
            key = f"{mod_name}.{name}"
            if key not in params:
                raise TruncatedFile(f"{path}: missing parameter {key}")
            if params[key].shape != p.data.shape:
                raise ShapeMismatch(f"{key}: {params[key].shape} vs {p.data.shape}")
            p.data = params[key].astype(np.float32)
    return embedder, extractor, hyper
