"""Depth evaluation: affine alignment, AbsRel / delta1, and edge-aware Chamfer.

The edge-aware metric unprojects only pixels close to ground-truth depth
discontinuities (found with a Canny detector run on the depth map) and
compares the two point sets. Predictions that smear a step into a ramp put
points in empty space between the surfaces, which this metric punishes while
AbsRel barely notices.
"""
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .depth_norm import DepthMap
from .exceptions import ConfigError, DataError, EmptyValidSet, ShapeMismatch, SingularAlignment

ALIGN_MODES = ("per_frame", "per_video")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @classmethod
    def default(cls, height, width):
        """Pinhole camera with a ~53 degree horizontal field of view."""
        f = float(width)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing intrinsics file: {path}")
        try:
            d = json.loads(path.read_text())
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed intrinsics file {path}: {exc}") from exc


@dataclass
class EvalReport:
    absrel: float
    delta1: float
    chamfer_all: float
    chamfer_edge: float
    scale: float
    shift: float
    n_valid: int
    n_edge: int

    def to_dict(self):
        return asdict(self)


@dataclass
class EdgeMask:
    mask: np.ndarray
    dilation_radius: int
    edges: np.ndarray = None


def _as_depth(d):
    return d if isinstance(d, DepthMap) else DepthMap(d)


# ---------------------------------------------------------------------------
# alignment and metrics


def _fit_affine(p, g):
    p = p.astype(np.float64)
    g = g.astype(np.float64)
    if p.size < 2:
        raise SingularAlignment("need at least two valid pixels for scale-shift alignment")
    pm, gm = p.mean(), g.mean()
    dp = p - pm
    var = np.dot(dp, dp)
    if var <= 1e-12 * max(1.0, pm * pm) * p.size:
        raise SingularAlignment("prediction is constant over the valid pixels")
    scale = np.dot(dp, g - gm) / var
    return float(scale), float(gm - scale * pm)


def align_scale_shift(pred, gt, valid=None, mode="per_frame"):
    """Least-squares ``(scale, shift)`` so that ``scale * pred + shift ~ gt``.

    With ``mode="per_video"`` all frames of a ``(T, H, W)`` stack share one fit.
    ``mode="per_frame"`` on a stack returns arrays of per-frame values.
    """
    if mode not in ALIGN_MODES:
        raise ConfigError(f"unknown alignment mode {mode!r}")
    gt = _as_depth(gt)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = gt.valid if valid is None else (np.asarray(valid, dtype=bool) & gt.valid)
    valid = valid & np.isfinite(pred)
    if mode == "per_frame" and pred.ndim == 3:
        fits = [_fit_affine(pred[i][valid[i]], gt.values[i][valid[i]]) for i in range(pred.shape[0])]
        return np.array([f[0] for f in fits]), np.array([f[1] for f in fits])
    return _fit_affine(pred[valid], gt.values[valid])


def apply_alignment(pred, scale, shift):
    pred = np.asarray(pred, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if scale.ndim == 1:
        scale = scale[:, None, None]
        shift = shift[:, None, None]
    return scale * pred + shift


def _metric_inputs(pred, gt, valid):
    gt = _as_depth(gt)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    m = gt.valid if valid is None else (np.asarray(valid, dtype=bool) & gt.valid)
    if not m.any():
        raise EmptyValidSet("no valid ground-truth pixels")
    return pred[m], gt.values[m]


def absrel(pred_aligned, gt, valid=None):
    p, g = _metric_inputs(pred_aligned, gt, valid)
    return float(np.mean(np.abs(p - g) / g))


def delta1(pred_aligned, gt, valid=None, threshold=1.25):
    p, g = _metric_inputs(pred_aligned, gt, valid)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(p > 0, ratio, np.inf)
    return float(np.mean(ratio < threshold))


# ---------------------------------------------------------------------------
# point clouds


def unproject(depth, K: CameraIntrinsics, mask=None):
    """Back-project valid (and optionally masked) pixels to camera-frame points.

    Pixel ``(row v, col u)`` has its center at integer coordinates.
    """
    depth = _as_depth(depth)
    if depth.shape != (K.height, K.width):
        raise ShapeMismatch(f"depth {depth.shape} does not match intrinsics {K.height}x{K.width}")
    sel = depth.valid if mask is None else (depth.valid & np.asarray(mask, dtype=bool))
    v, u = np.nonzero(sel)
    z = depth.values[v, u]
    x = (u - K.cx) * z / K.fx
    y = (v - K.cy) * z / K.fy
    return np.stack([x, y, z], axis=1)


def chamfer(a, b):
    """Symmetric mean nearest-neighbour Euclidean distance between two clouds."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyValidSet("chamfer distance needs two non-empty point clouds")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def write_ply(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, points, fmt="%.6f")


def read_ply(path):
    lines = Path(path).read_text().splitlines()
    try:
        end = lines.index("end_header")
        count = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    except (ValueError, StopIteration) as exc:
        raise DataError(f"malformed PLY header in {path}") from exc
    body = [l for l in lines[end + 1:] if l.strip()]
    if len(body) != count:
        raise DataError(f"{path}: header declares {count} vertices, found {len(body)}")
    if count == 0:
        return np.zeros((0, 3))
    return np.loadtxt(body, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# edges


def _disc(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def _nonmax_suppression(mag, gx, gy):
    """Keep pixels that are local maxima across the gradient direction.

    Directions are quantized to 0/45/90/135 degrees. Ties are broken towards
    the forward neighbour so a symmetric two-pixel ridge keeps one pixel.
    """
    h, w = mag.shape
    pad = np.pad(mag, 1, mode="constant")
    angle = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    # (dy, dx) offsets of the forward neighbour along the gradient, per sector
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = pad[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= (sector == s) & (mag > bwd) & (mag >= fwd)
    return keep & (mag > 0)


def canny_edges(image, low, high, sigma=1.4):
    """Canny edges of a float image whose intensities are on a 0-255 scale."""
    img = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma=sigma, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    thin = _nonmax_suppression(mag, gx, gy)
    strong = thin & (mag >= high)
    weak = thin & (mag >= low)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(mag.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_edge_mask(gt, low=30.0, high=90.0, dilation_radius=5, sigma=1.4) -> EdgeMask:
    """Edge band around depth discontinuities of a ground-truth map.

    Valid depth is min-max scaled to [0, 255] (invalid pixels take the
    minimum), passed through Canny, and the edge set is dilated by a disc.
    """
    gt = _as_depth(gt)
    if not gt.valid.any():
        raise EmptyValidSet("ground truth has no valid pixels")
    vals = gt.values[gt.valid]
    lo, hi = vals.min(), vals.max()
    img = np.full(gt.shape, 0.0)
    if hi > lo:
        img[gt.valid] = (gt.values[gt.valid] - lo) / (hi - lo) * 255.0
    edges = canny_edges(img, low, high, sigma)
    mask = ndimage.binary_dilation(edges, structure=_disc(dilation_radius)) if dilation_radius > 0 else edges
    return EdgeMask(mask, int(dilation_radius), edges)


def edge_chamfer(pred, gt, K: CameraIntrinsics, mask, align=True):
    """Chamfer distance between predicted and GT points inside ``mask``.

    ``pred`` is a raw depth grid (aligned per frame to ``gt`` first unless
    ``align=False``). The same pixel selection is used for both clouds.
    """
    gt = _as_depth(gt)
    pred_vals = np.asarray(pred.values if isinstance(pred, DepthMap) else pred, dtype=np.float64)
    m = mask.mask if isinstance(mask, EdgeMask) else np.asarray(mask, dtype=bool)
    if align:
        s, t = align_scale_shift(pred_vals, gt)
        pred_vals = s * pred_vals + t
    sel = m & gt.valid & np.isfinite(pred_vals)
    if not sel.any():
        raise EmptyValidSet("edge mask selects no valid pixels")
    a = unproject(DepthMap(pred_vals, sel), K)
    b = unproject(DepthMap(gt.values, sel), K)
    return chamfer(a, b)


def evaluate_depth(pred, gt, K=None, mode="per_frame", edge=True, low=30.0, high=90.0, dilation_radius=5):
    """Align, score and (optionally) run the edge-aware Chamfer on one map or one clip."""
    gt = _as_depth(gt)
    pred = np.asarray(pred, dtype=np.float64)
    s, t = align_scale_shift(pred, gt, mode=mode)
    aligned = apply_alignment(pred, s, t)
    report = EvalReport(
        absrel=absrel(aligned, gt),
        delta1=delta1(aligned, gt),
        chamfer_all=float("nan"),
        chamfer_edge=float("nan"),
        scale=float(np.mean(s)),
        shift=float(np.mean(t)),
        n_valid=int(gt.valid.sum()),
        n_edge=0,
    )
    if K is None:
        return report
    frames = [(aligned, gt)] if aligned.ndim == 2 else [
        (aligned[i], DepthMap(gt.values[i], gt.valid[i])) for i in range(aligned.shape[0])
    ]
    all_d, edge_d, n_edge = [], [], 0
    for a, g in frames:
        all_d.append(edge_chamfer(a, g, K, g.valid, align=False))
        if edge:
            em = canny_edge_mask(g, low, high, dilation_radius)
            sel = em.mask & g.valid
            n_edge += int(sel.sum())
            if sel.any():
                edge_d.append(edge_chamfer(a, g, K, sel, align=False))
    report.chamfer_all = float(np.mean(all_d))
    report.chamfer_edge = float(np.mean(edge_d)) if edge_d else 0.0
    report.n_edge = n_edge
    return report
