"""Command-line interface: ``pxdepth <command> ...``.

Exit codes: 0 success, 2 bad arguments or configuration, 3 data errors,
4 numeric failures. Every failure prints one line ``error: <code>: <message>``
to stderr.
"""
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import pipeline as P
from . import synth
from .depth_norm import DepthMap
from .exceptions import ConfigError, DataError, PxDepthError
from .flow_matching import SamplerConfig
from .geometry import CameraIntrinsics, evaluate_depth, unproject, write_ply

REPORT_KEYS = ("absrel", "delta1", "chamfer_all", "chamfer_edge", "scale", "shift", "n_valid", "n_edge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _resolution(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like HxW, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def num_workers():
    raw = os.environ.get("PPD_NUM_WORKERS")
    if raw is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PPD_NUM_WORKERS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("PPD_NUM_WORKERS must be at least 1")
    return n


def load_records(records):
    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        return list(pool.map(synth.load_record, records))


def colorize(depth, valid):
    """8-bit RGB preview: near is bright, far is dark, invalid is black."""
    out = np.zeros(depth.shape + (3,), dtype=np.uint8)
    if not valid.any():
        return out
    inv = 1.0 / depth[valid]
    lo, hi = np.percentile(inv, [2, 98])
    u = np.clip((inv - lo) / max(hi - lo, 1e-12), 0, 1)
    ramp = np.stack([u, u ** 2, 0.3 + 0.7 * (1 - u) * u * 2], axis=-1)
    out[valid] = np.round(np.clip(ramp, 0, 1) * 255).astype(np.uint8)
    return out


def write_depth_outputs(path, depth: DepthMap):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    synth.save_depth16(path, depth)
    preview = path.with_name(path.stem + "_preview.png")
    Image.fromarray(colorize(depth.values, depth.valid), mode="RGB").save(preview)
    return preview


def cmd_synth(args):
    samples = synth.synthesize(args.num, seed=args.seed, resolution=args.resolution,
                               clips=args.clips, clip_length=args.clip_length)
    records = synth.write_dataset(args.out, samples, split=args.split)
    print(f"wrote {len(records)} frames to {args.out}")


def cmd_train(args):
    config = P.TrainConfig.from_json(args.config)
    records = synth.read_dataset(args.data, split=args.split)
    if not records:
        raise DataError(f"no records in {args.data}" + (f" split {args.split}" if args.split else ""))
    samples = load_records(records)
    data = P.data_from_samples(samples, config)
    init = P.load_checkpoint(args.resume) if args.resume else None
    ckpt = P.train(config, data, init=init, checkpoint_path=args.out)
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"trained to step {ckpt.step}; final loss {last.get('loss', float('nan')):.6f}; saved {args.out}")


def cmd_infer(args):
    ckpt = P.load_checkpoint(args.ckpt)
    image = synth.load_rgb(args.image)
    pred = P.Predictor(ckpt).predict_images(image[None], SamplerConfig(args.steps, args.seed))[0]
    if args.out_depth:
        write_depth_outputs(args.out_depth, pred.depth)
    if args.out_ply:
        h, w = image.shape[:2]
        K = CameraIntrinsics.from_json(args.intrinsics) if args.intrinsics else CameraIntrinsics.default(h, w)
        write_ply(args.out_ply, unproject(pred.depth, K))
    print(f"depth {pred.depth.values.shape[0]}x{pred.depth.values.shape[1]}, "
          f"{int(pred.depth.valid.sum())} valid pixels")


def _clip_frames(clip_dir):
    clip_dir = Path(clip_dir)
    if not clip_dir.is_dir():
        raise DataError(f"clip directory does not exist: {clip_dir}")
    paths = sorted(clip_dir.glob("*_rgb.png"))
    if not paths:
        raise DataError(f"no *_rgb.png frames in {clip_dir}")
    return paths


def cmd_infer_video(args):
    ckpt = P.load_checkpoint(args.ckpt)
    paths = _clip_frames(args.clip)
    frames = np.stack([synth.load_rgb(p) for p in paths])
    preds = P.Predictor(ckpt).predict_clip(frames, SamplerConfig(args.steps, args.seed),
                                           window=args.window, shared_noise=args.shared_noise)
    out = Path(args.out)
    for p, pred in zip(paths, preds):
        stem = p.name[: -len("_rgb.png")]
        write_depth_outputs(out / f"{stem}_depth16.png", pred.depth)
    print(f"wrote {len(preds)} depth maps to {out}")


def _pairs(pred_dir, gt_dir):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"directory does not exist: {d}")
    gts = sorted(gt_dir.rglob("*_depth16.png"))
    if not gts:
        raise DataError(f"no *_depth16.png files under {gt_dir}")
    pairs = []
    for g in gts:
        rel = g.relative_to(gt_dir)
        p = pred_dir / rel
        if not p.exists():
            raise DataError(f"missing prediction for {rel}: expected {p}")
        pairs.append((rel, p, g))
    return pairs


def _intrinsics_for(gt_path, shape):
    k = gt_path.with_name(gt_path.name.replace("_depth16.png", "_K.json"))
    return CameraIntrinsics.from_json(k) if k.exists() else CameraIntrinsics.default(*shape)


def _aggregate(reports):
    out = {}
    for key in REPORT_KEYS:
        vals = [getattr(r, key) for r in reports]
        if key in ("n_valid", "n_edge"):
            out[key] = int(sum(vals))
        else:
            vals = [v for v in vals if v is not None and np.isfinite(v)]
            out[key] = float(np.mean(vals)) if vals else None
    return out


def cmd_eval(args):
    pairs = _pairs(args.pred, args.gt)
    groups = {}
    for rel, p, g in pairs:
        key = str(rel.parent) if args.mode == "per_video" else str(rel)
        groups.setdefault(key, []).append((p, g))
    reports = []
    for key in sorted(groups):
        items = groups[key]
        preds = [synth.load_depth16(p) for p, _ in items]
        gts = [synth.load_depth16(g) for _, g in items]
        K = _intrinsics_for(items[0][1], gts[0].values.shape)
        if len(items) == 1:
            pred, gt = preds[0].values, gts[0]
        else:
            pred = np.stack([d.values for d in preds])
            gt = DepthMap(np.stack([d.values for d in gts]), np.stack([d.valid for d in gts]))
        reports.append(evaluate_depth(pred, gt, K, mode=args.mode, edge=args.edge_chamfer))
    report = _aggregate(reports)
    if not args.edge_chamfer:
        report["chamfer_edge"] = None
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n")
    print(text)


def cmd_export_ply(args):
    depth = synth.load_depth16(args.depth)
    K = CameraIntrinsics.from_json(args.intrinsics)
    if (K.height, K.width) != depth.values.shape:
        raise DataError(f"intrinsics are for {K.height}x{K.width}, depth is {depth.values.shape}")
    pts = unproject(depth, K)
    write_ply(args.out, pts)
    print(f"wrote {len(pts)} points to {args.out}")


def build_parser():
    parser = _Parser(prog="pxdepth", description="Pixel-space flow-matching depth estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=16)
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--clips", action="store_true", help="generate camera-motion clips")
    kind.add_argument("--images", dest="clips", action="store_false", help="generate still images (default)")
    p.add_argument("--clip-length", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=_resolution, default=(64, 64))
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train or finetune a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume (same stage) or to initialize from (new stage)")
    p.add_argument("--split", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict depth for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-depth")
    p.add_argument("--out-ply")
    p.add_argument("--intrinsics", help="camera JSON for the point cloud (default: 53 degree pinhole)")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("infer-video", help="predict depth for a clip directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--shared-noise", action="store_true")
    p.set_defaults(func=cmd_infer_video)

    p = sub.add_parser("eval", help="score predicted depth maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("per_frame", "per_video"), default="per_frame")
    p.add_argument("--edge-chamfer", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="unproject a depth PNG to a point cloud")
    p.add_argument("--depth", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)
    return parser


def _fail(code, message):
    print(f"error: {code}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _fail(2, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except PxDepthError as exc:
        return _fail(exc.exit_code, exc)
    except (OSError, ValueError) as exc:
        return _fail(3, exc)
    except FloatingPointError as exc:
        return _fail(4, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
