"""Command-line interface.

Subcommands: scene, bridge, embed, extract, attack, train, eval.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment as ag
from . import bridge, io, nn, pipeline, rasterizer
from .core import WatermarkMessage, flatten
from .errors import ActivationOverflow, NonFiniteLoss, SplatmarkError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _save_png(path, array):
    """Save an (H, W) or (H, W, 3) float array in [0, 1] as PNG."""
    u8 = np.clip(np.round(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def _load_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return img


def _splatter_cameras(splatter, n_views=None):
    cloud = flatten(splatter)
    v, h, _w = splatter.data.shape[:3]
    return bridge.default_orbit_for_cloud(
        cloud, n_views=n_views or v, grid=h
    )


def cmd_scene(args) -> int:
    cloud = pipeline.make_scene(args.seed)
    io.write_ply(cloud, args.out)
    print(f"wrote {cloud.count} Gaussians to {args.out}")
    return EXIT_OK


def cmd_bridge(args) -> int:
    cloud = io.read_ply(args.input)
    cams = bridge.default_orbit_for_cloud(cloud, n_views=args.views, grid=args.grid)
    splatter = bridge.cloud_to_splatter(cloud, cams, args.grid, args.grid)
    io.write_splatter(splatter, args.out)
    print(f"bridged {cloud.count} Gaussians into {args.views}x{args.grid}x{args.grid} grid -> {args.out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    from . import gup

    splatter = io.read_splatter(args.input)
    embedder, _extractor, hyper = nn.load_models(args.checkpoint)
    message = WatermarkMessage.from_hex(args.message, int(hyper["n_bits"]))
    cloud = flatten(splatter)
    cams = _splatter_cameras(splatter)
    u = gup.uncertainty(cloud, cams)
    heat = gup.gup_heatmap(cloud, u, cams)
    before = embedder.update_count()
    marked = pipeline.watermark_splatter(
        embedder, splatter, heat.gamma, message, args.alpha
    )
    assert embedder.update_count() == before  # embedding is optimization-free
    io.write_splatter(marked, args.out)
    if args.ply_out:
        io.write_ply(flatten(marked), args.ply_out)
    if args.gamma_dir:
        gamma_dir = Path(args.gamma_dir)
        gamma_dir.mkdir(parents=True, exist_ok=True)
        for v, g in enumerate(heat.gamma):
            _save_png(gamma_dir / f"gamma_{v}.png", g)
    print(f"embedded message {message.to_hex()} -> {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    _embedder, extractor, hyper = nn.load_models(args.checkpoint)
    n_bits = int(hyper["n_bits"])
    path = Path(args.input)
    if path.suffix.lower() == ".splt":
        splatter = io.read_splatter(path)
        result = pipeline.extract_from_params(extractor, splatter, n_bits)
        mask = None
    else:
        img = _load_png(path)
        mask, probs = nn.extract(extractor, img)
        result = nn.aggregate_message(mask, probs)
    message = WatermarkMessage(tuple(int(b) for b in result.bits))
    if args.mask_out and mask is not None:
        _save_png(args.mask_out, mask)
    if result.no_watermark:
        print("no watermark detected (coverage 0.00)")
    else:
        print(
            f"message {message.to_hex()} confidence {result.confidence:.3f} "
            f"coverage {result.coverage:.3f}"
        )
    return EXIT_OK


def cmd_attack(args) -> int:
    spec = ag.AttackSpec(args.kind, args.strength, args.seed)
    path = Path(args.input)
    if spec.is_2d:
        img = _load_png(path)
        out = ag.attack2d(img, spec)
        _save_png(args.out, out.data)
    else:
        if path.suffix.lower() == ".splt":
            cloud = flatten(io.read_splatter(path))
        else:
            cloud = io.read_ply(path)
        attacked = ag.attack3d(cloud, spec)
        io.write_ply(attacked, args.out)
    print(f"applied {spec.kind} (strength {spec.strength}) -> {args.out}")
    return EXIT_OK


def _config_from_args(args) -> pipeline.RunConfig:
    overrides = {
        key: getattr(args, key)
        for key in ("n_bits", "epochs", "n_scenes", "seed", "alpha", "out_dir")
        if getattr(args, key, None) is not None
    }
    if args.config:
        return pipeline.RunConfig.from_file(args.config, overrides)
    return pipeline.RunConfig(**{k: v for k, v in overrides.items()})


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    path = pipeline.train(cfg)
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    embedder, extractor, _hyper = nn.load_models(args.checkpoint)
    cfg = _config_from_args(args)
    seeds = [int(s) for s in args.scenes.split(",")]
    report = pipeline.evaluate(
        embedder, extractor, cfg, seeds,
        attacks2d=ag.paper_attacks_2d(cfg.seed),
        attacks3d=ag.paper_attacks_3d(cfg.seed),
    )
    print(report.to_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="splatmark", description="3D Gaussian Splatting watermarking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene", help="emit a synthetic scene as PLY")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("bridge", help="convert PLY to a Splatter Image (SPLT)")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--grid", type=int, default=64)
    p.set_defaults(func=cmd_bridge)

    p = sub.add_parser("embed", help="embed a message into a SPLT file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--message", required=True, help="hex payload")
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--ply-out")
    p.add_argument("--gamma-dir", help="directory for heatmap PNG dumps")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="extract a message from PNG or SPLT")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask-out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("attack", help="apply an attack to an image or model")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", required=True, choices=ag.KINDS_2D + ag.KINDS_3D)
    p.add_argument("--strength", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attack)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--n-bits", dest="n_bits", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--n-scenes", dest="n_scenes", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--out-dir", dest="out_dir")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--scenes", default="0,1", help="comma-separated seeds")
            p.add_argument("--csv")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (NonFiniteLoss, ActivationOverflow) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SplatmarkError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
