"""File I/O: community 3DGS PLY layout and the SPLT grid container.

PLY files store raw (pre-activation) parameters: opacity as a logit, scale
as a log, color as SH DC coefficients.  Reading applies the activations;
writing inverts them.  The SPLT container stores activated Splatter Image
grids verbatim as little-endian float32.
"""
from __future__ import annotations

import struct

import numpy as np

from .core import SH_C0, GaussianCloud, SplatterImage, NUM_CHANNELS
from .errors import ActivationOverflow, BadMagic, DimMismatch, ParseError, TruncatedFile

_PLY_FIELDS = (
    "x",
    "y",
    "z",
    "f_dc_0",
    "f_dc_1",
    "f_dc_2",
    "opacity",
    "scale_0",
    "scale_1",
    "scale_2",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
)

_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
}

# Opacity clamp before the logit so that writing never produces +-inf.
_LOGIT_EPS = 1e-7

SPLT_MAGIC = b"SPLT"
SPLT_VERSION = 1


def read_ply(path) -> GaussianCloud:
    """Read a binary-little-endian 3DGS PLY file and apply activations."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.find(b"end_header\n")
    if header_end < 0 or not raw.startswith(b"ply"):
        raise ParseError(f"{path}: not a PLY file")
    header = raw[:header_end].decode("ascii", errors="replace").splitlines()
    body = raw[header_end + len(b"end_header\n") :]

    count = None
    props: list[tuple[str, str]] = []
    fmt_ok = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            if parts[1] == "vertex":
                count = int(parts[2])
            elif count is not None:
                break  # only the vertex element is read
        elif parts[0] == "property" and count is not None:
            if parts[1] == "list":
                raise ParseError(f"{path}: list properties are not supported")
            props.append((parts[2], parts[1]))
    if not fmt_ok:
        raise ParseError(f"{path}: format must be binary_little_endian")
    if count is None:
        raise ParseError(f"{path}: missing vertex element")
    try:
        dtype = np.dtype([(name, _PLY_TYPES[typ][0]) for name, typ in props])
    except KeyError as exc:
        raise ParseError(f"{path}: unsupported property type {exc}") from None
    missing = [f for f in _PLY_FIELDS if f not in dtype.names]
    if missing:
        raise ParseError(f"{path}: missing fields {missing}")
    if len(body) < count * dtype.itemsize:
        raise ParseError(
            f"{path}: body holds {len(body)} bytes, need {count * dtype.itemsize}"
        )
    rows = np.frombuffer(body[: count * dtype.itemsize], dtype=dtype)

    col = lambda name: rows[name].astype(np.float64)
    positions = np.stack([col("x"), col("y"), col("z")], axis=1)
    colors = 0.5 + SH_C0 * np.stack([col(f"f_dc_{k}") for k in range(3)], axis=1)
    opacities = 1.0 / (1.0 + np.exp(-col("opacity")))
    scales = np.exp(np.stack([col(f"scale_{k}") for k in range(3)], axis=1))
    quats = np.stack([col(f"rot_{k}") for k in range(4)], axis=1)

    if not (np.all(np.isfinite(scales)) and np.all(np.isfinite(opacities))):
        raise ActivationOverflow(f"{path}: non-finite value after activation")
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if np.any(norms < 1e-8):
        raise ParseError(f"{path}: degenerate quaternion")
    quats = quats / norms
    colors = np.clip(colors, 0.0, 1.0)

    return GaussianCloud(positions, quats, scales, opacities, colors)


def write_ply(cloud: GaussianCloud, path) -> None:
    """Write a cloud in the community 3DGS PLY layout (raw parameters)."""
    n = cloud.count
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        + "".join(f"property float {f}\n" for f in _PLY_FIELDS)
        + "end_header\n"
    )
    opacity = np.clip(cloud.opacities.astype(np.float64), _LOGIT_EPS, 1 - _LOGIT_EPS)
    rows = np.empty((n, len(_PLY_FIELDS)), dtype=np.float64)
    rows[:, 0:3] = cloud.positions
    rows[:, 3:6] = (cloud.colors.astype(np.float64) - 0.5) / SH_C0
    rows[:, 6] = np.log(opacity / (1.0 - opacity))
    rows[:, 7:10] = np.log(cloud.scales.astype(np.float64))
    rows[:, 10:14] = cloud.rotations
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rows.astype("<f4").tobytes())


def write_splatter(s: SplatterImage, path) -> None:
    """Write the SPLT container: magic, version, dims, raw float32 grid."""
    with open(path, "wb") as fh:
        fh.write(SPLT_MAGIC)
        fh.write(
            struct.pack(
                "<5I", SPLT_VERSION, s.views, s.height, s.width, NUM_CHANNELS
            )
        )
        fh.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())


def read_splatter(path) -> SplatterImage:
    """Read a SPLT container; the round trip is bit-exact."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SPLT_MAGIC:
        raise BadMagic(f"{path}: expected {SPLT_MAGIC!r} magic")
    if len(raw) < 24:
        raise TruncatedFile(f"{path}: header truncated")
    version, v, h, w, c = struct.unpack("<5I", raw[4:24])
    if version != SPLT_VERSION:
        raise DimMismatch(f"{path}: unsupported version {version}")
    if c != NUM_CHANNELS:
        raise DimMismatch(f"{path}: expected {NUM_CHANNELS} channels, got {c}")
    expected = v * h * w * c * 4
    payload = raw[24:]
    if len(payload) < expected:
        raise TruncatedFile(
            f"{path}: payload holds {len(payload)} bytes, need {expected}"
        )
    data = np.frombuffer(payload[:expected], dtype="<f4").reshape(v, h, w, c)
    return SplatterImage(data.copy())
