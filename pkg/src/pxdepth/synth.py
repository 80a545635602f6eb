"""Procedural scenes with exact, step-edged ground-truth depth.

A scene is a tilted background plane plus a handful of fronto-parallel
rectangles and ellipses at distinct depths. Everything is defined in 3-D so
that a translating camera re-renders it consistently for clips.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .depth_norm import DepthMap
from .exceptions import ConfigError, DataError
from .geometry import CameraIntrinsics

GENERATOR_VERSION = "pxdepth-synth/1"
TEXTURES = ("flat", "gradient", "checker")
MIN_SEPARATION = 0.3
MIN_VISIBLE_PIXELS = 12


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    resolution: Tuple[int, int] = (64, 64)
    num_shapes: int = 4
    depth_range: Tuple[float, float] = (1.0, 6.0)
    texture: str = "flat"
    camera_motion: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 2 <= self.num_shapes <= 8:
            raise ConfigError("num_shapes must be between 2 and 8")
        z_near, z_far = self.depth_range
        if not 0 < z_near < z_far:
            raise ConfigError("depth_range must satisfy 0 < z_near < z_far")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}")
        h, w = self.resolution
        if h <= 0 or w <= 0:
            raise ConfigError("resolution must be positive")
        levels = _depth_levels(z_near, z_far - 1.0 - MIN_SEPARATION)
        if len(levels) < self.num_shapes:
            raise ConfigError(
                f"depth_range {self.depth_range} too narrow for {self.num_shapes} shapes "
                f"separated by {MIN_SEPARATION} m"
            )


@dataclass
class Shape:
    kind: str  # "rect" or "ellipse"
    center: Tuple[float, float]  # metric X, Y in world frame
    half_size: Tuple[float, float]
    depth: float
    color: np.ndarray
    checker: float  # checker period in meters


@dataclass
class Scene:
    shapes: List[Shape]
    plane_depth: float
    plane_slope: float
    plane_color: np.ndarray
    texture: str
    K: CameraIntrinsics


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) float in [0, 1]
    depths: np.ndarray  # (T, H, W) meters, 0 = invalid
    intrinsics: Optional[CameraIntrinsics] = None

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 2:
            raise ConfigError("a clip needs at least two (H, W, 3) frames")

    def __len__(self):
        return self.frames.shape[0]


def _depth_levels(lo, hi, step=MIN_SEPARATION + 0.05):
    return np.arange(lo, hi + 1e-9, step)


def _build_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    h, w = spec.resolution
    K = CameraIntrinsics.default(h, w)
    z_near, z_far = spec.depth_range
    plane_slope = rng.uniform(-0.15, 0.15)
    plane_depth = z_far - 0.5
    levels = _depth_levels(z_near, z_far - 1.0 - MIN_SEPARATION)
    depths = np.sort(rng.choice(levels, size=spec.num_shapes, replace=False))[::-1]
    shapes = []
    for z in depths:
        px_half = rng.uniform(0.08, 0.3, size=2) * np.array([w, h])
        px_center = rng.uniform(0.15, 0.85, size=2) * np.array([w, h])
        shapes.append(Shape(
            kind="rect" if rng.random() < 0.5 else "ellipse",
            center=(float((px_center[0] - K.cx) * z / K.fx), float((px_center[1] - K.cy) * z / K.fy)),
            half_size=(float(px_half[0] * z / K.fx), float(px_half[1] * z / K.fy)),
            depth=float(z),
            color=rng.uniform(0.15, 0.95, size=3),
            checker=float(rng.uniform(0.08, 0.2) * z),
        ))
    return Scene(shapes, plane_depth, plane_slope, rng.uniform(0.1, 0.6, size=3), spec.texture, K)


def _render(scene: Scene, cam=(0.0, 0.0, 0.0)):
    """Ray-cast the scene from a camera translated by ``cam``; returns image, depth, shape ids."""
    K = scene.K
    tx, ty, tz = cam
    v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    xr = (u - K.cx) / K.fx
    yr = (v - K.cy) / K.fy
    # background plane Z = d0 + g * Y in world coordinates
    g = scene.plane_slope
    depth = (scene.plane_depth + g * ty - tz) / (1.0 - g * yr)
    ids = np.full(depth.shape, -1, dtype=np.int64)
    wx = depth * xr + tx
    wy = depth * yr + ty
    image = _shade(scene.plane_color, wx, wy, 0.4, scene.texture, u / K.width)
    for k, s in enumerate(scene.shapes):  # far to near, later shapes occlude
        z = s.depth - tz
        if z <= 0:
            continue
        sx = z * xr + tx - s.center[0]
        sy = z * yr + ty - s.center[1]
        if s.kind == "rect":
            inside = (np.abs(sx) <= s.half_size[0]) & (np.abs(sy) <= s.half_size[1])
        else:
            inside = (sx / s.half_size[0]) ** 2 + (sy / s.half_size[1]) ** 2 <= 1.0
        depth = np.where(inside, z, depth)
        ids = np.where(inside, k, ids)
        local_u = (sx / s.half_size[0] + 1.0) / 2.0
        shade = _shade(s.color, sx, sy, s.checker, scene.texture, local_u)
        image = np.where(inside[..., None], shade, image)
    return np.clip(image, 0.0, 1.0).astype(np.float32), depth, ids


def _shade(color, x, y, period, texture, ramp):
    base = np.broadcast_to(np.asarray(color, dtype=np.float64), x.shape + (3,))
    if texture == "flat":
        return base.copy()
    if texture == "gradient":
        return base * (0.7 + 0.3 * np.clip(ramp, 0.0, 1.0))[..., None]
    parity = (np.floor(x / period) + np.floor(y / period)) % 2
    return base * np.where(parity == 0, 1.0, 0.75)[..., None]


def _visible_counts(ids, n):
    return np.bincount(ids[ids >= 0], minlength=n)


def build_scene(spec: SceneSpec) -> Scene:
    """Lay out a 3-D scene from the spec's seed.

    Layouts where some shape ends up (nearly) fully occluded are redrawn from
    the same generator, so the result is still a pure function of the seed.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(1000):
        scene = _build_scene(spec, rng)
        _, _, ids = _render(scene)
        if (_visible_counts(ids, spec.num_shapes) >= MIN_VISIBLE_PIXELS).all():
            return scene
    raise ConfigError("could not place all shapes visibly; reduce num_shapes")


def generate_scene(spec: SceneSpec):
    """Render one scene: ``(image (H, W, 3) float32, DepthMap, CameraIntrinsics)``."""
    scene = build_scene(spec)
    image, depth, _ = _render(scene)
    return image, DepthMap(depth), scene.K


def generate_clip(spec: SceneSpec, num_frames: int) -> VideoClip:
    """Render ``num_frames`` views with the camera moving ``camera_motion`` per frame."""
    if num_frames < 2:
        raise ConfigError("a clip needs at least 2 frames")
    scene = build_scene(spec)
    motion = np.asarray(spec.camera_motion, dtype=np.float64)
    frames, depths = [], []
    for k in range(num_frames):
        image, depth, ids = _render(scene, tuple(k * motion))
        if not (ids >= 0).any():
            raise ConfigError(f"camera motion moves every shape out of frame {k}")
        if not (depth > 0).all():
            raise ConfigError(f"camera passes through the background plane at frame {k}")
        frames.append(image)
        depths.append(depth)
    return VideoClip(np.stack(frames), np.stack(depths), scene.K)


# ---------------------------------------------------------------------------
# on-disk datasets


@dataclass
class Sample:
    id: str
    image: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    clip: Optional[str] = None
    frame: Optional[int] = None


@dataclass(frozen=True)
class SampleRecord:
    split: str
    id: str
    image: Path
    depth: Path
    intrinsics: Path
    clip: Optional[str] = None
    frame: Optional[int] = None

    def sort_key(self):
        return (self.split, self.clip or "", -1 if self.frame is None else self.frame, self.id)


def save_rgb(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_rgb(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def save_depth16(path, depth):
    """Depth in meters -> 16-bit PNG in millimeters; invalid or non-positive -> 0."""
    d = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    valid = depth.valid if isinstance(depth, DepthMap) else (np.isfinite(d) & (d > 0))
    mm = np.where(valid, np.round(np.nan_to_num(d) * 1000.0), 0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def load_depth16(path) -> DepthMap:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing depth file: {path}")
    try:
        with Image.open(path) as im:
            raw = np.asarray(im).astype(np.float64)
    except OSError as exc:
        raise DataError(f"cannot decode depth {path}: {exc}") from exc
    if raw.ndim != 2:
        raise DataError(f"depth file {path} is not single-channel")
    return DepthMap(raw / 1000.0, raw > 0)


def _record_paths(split_dir, sample: Sample):
    if sample.clip is not None:
        stem = split_dir / sample.clip / f"{sample.frame:04d}"
    else:
        stem = split_dir / sample.id
    return (stem.parent / f"{stem.name}_rgb.png", stem.parent / f"{stem.name}_depth16.png",
            stem.parent / f"{stem.name}_K.json")


def write_dataset(root, samples, split="train") -> List[SampleRecord]:
    """Write samples under ``root/split`` and merge them into ``root/manifest.json``."""
    root = Path(root)
    split_dir = root / split
    records = []
    for s in samples:
        img_p, dep_p, k_p = _record_paths(split_dir, s)
        img_p.parent.mkdir(parents=True, exist_ok=True)
        save_rgb(img_p, s.image)
        save_depth16(dep_p, s.depth)
        s.intrinsics.to_json(k_p)
        records.append(SampleRecord(split, s.id, img_p, dep_p, k_p, s.clip, s.frame))
    manifest = root / "manifest.json"
    existing = []
    if manifest.exists():
        existing = [r for r in _parse_manifest(root) if r.split != split]
    all_records = sorted(existing + records, key=SampleRecord.sort_key)
    manifest.write_text(json.dumps({
        "generator_version": GENERATOR_VERSION,
        "records": [_record_json(root, r) for r in all_records],
    }, indent=1))
    return sorted(records, key=SampleRecord.sort_key)


def _record_json(root, r: SampleRecord):
    return {
        "split": r.split, "id": r.id, "clip": r.clip, "frame": r.frame,
        "image": str(r.image.relative_to(root)), "depth": str(r.depth.relative_to(root)),
        "intrinsics": str(r.intrinsics.relative_to(root)),
    }


def _parse_manifest(root):
    path = root / "manifest.json"
    try:
        data = json.loads(path.read_text())
        return [
            SampleRecord(d["split"], d["id"], root / d["image"], root / d["depth"],
                         root / d["intrinsics"], d.get("clip"), d.get("frame"))
            for d in data["records"]
        ]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc


def _scan(root):
    records = []
    for img in sorted(root.rglob("*_rgb.png")):
        rel = img.relative_to(root)
        split = rel.parts[0]
        stem = img.name[: -len("_rgb.png")]
        if len(rel.parts) == 3:
            clip, frame, rid = rel.parts[1], int(stem), f"{rel.parts[1]}_{stem}"
        else:
            clip, frame, rid = None, None, stem
        records.append(SampleRecord(split, rid, img, img.with_name(f"{stem}_depth16.png"),
                                    img.with_name(f"{stem}_K.json"), clip, frame))
    return records


def read_dataset(root, split=None, validate=True) -> List[SampleRecord]:
    """List dataset records in deterministic sorted order.

    Uses ``manifest.json`` when present, otherwise scans for ``*_rgb.png``.
    With ``validate`` every referenced file must exist and image/depth
    resolutions must agree with the intrinsics.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    records = _parse_manifest(root) if (root / "manifest.json").exists() else _scan(root)
    if split is not None:
        records = [r for r in records if r.split == split]
    records = sorted(records, key=SampleRecord.sort_key)
    if validate:
        for r in records:
            _validate_record(r)
    return records


def _validate_record(r: SampleRecord):
    for p in (r.image, r.depth, r.intrinsics):
        if not p.exists():
            raise DataError(f"missing file: {p}")
    K = CameraIntrinsics.from_json(r.intrinsics)
    try:
        with Image.open(r.image) as im:
            img_size = im.size
        with Image.open(r.depth) as im:
            dep_size = im.size
    except OSError as exc:
        raise DataError(f"cannot decode files of record {r.id}: {exc}") from exc
    if img_size != dep_size or img_size != (K.width, K.height):
        raise DataError(
            f"resolution mismatch for {r.id}: rgb {img_size}, depth {dep_size}, K {(K.width, K.height)}"
        )


def load_record(r: SampleRecord) -> Sample:
    depth = load_depth16(r.depth)
    return Sample(r.id, load_rgb(r.image), depth.values, CameraIntrinsics.from_json(r.intrinsics), r.clip, r.frame)


def group_clips(records):
    """``{clip_name: [records in frame order]}`` for clip records."""
    clips = {}
    for r in records:
        if r.clip is not None:
            clips.setdefault((r.split, r.clip), []).append(r)
    return {k: sorted(v, key=lambda r: r.frame) for k, v in sorted(clips.items())}


def synthesize(num, seed=0, resolution=(64, 64), clips=False, clip_length=8, texture=None):
    """Generate ``num`` samples (or ``num`` clips) with per-item seeds ``seed + i``."""
    out = []
    for i in range(num):
        rng = np.random.default_rng([seed, i])
        spec = SceneSpec(
            seed=int(rng.integers(2**31)),
            resolution=tuple(resolution),
            num_shapes=int(rng.integers(2, 6)),
            texture=texture or TEXTURES[int(rng.integers(len(TEXTURES)))],
            camera_motion=(float(rng.uniform(-0.05, 0.05)), 0.0, 0.0) if clips else (0.0, 0.0, 0.0),
        )
        if clips:
            clip = generate_clip(spec, clip_length)
            name = f"clip{i:05d}"
            for k in range(clip_length):
                out.append(Sample(f"{name}_{k:04d}", clip.frames[k], clip.depths[k], clip.intrinsics, name, k))
        else:
            image, depth, K = generate_scene(spec)
            out.append(Sample(f"{i:06d}", image, depth.values, K))
    return out
