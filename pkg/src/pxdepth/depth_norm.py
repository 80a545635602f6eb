"""Depth <-> normalized diffusion target.

Monocular models work on log depth, video models on disparity. In both cases
the transformed values are mapped to ``[-0.5, 0.5]`` using robust percentile
bounds of each map (or of each clip, when a stack of frames is passed in).
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DegenerateRange, EmptyValidSet, ShapeMismatch

REPRESENTATIONS = ("log_depth", "disparity")


@dataclass
class DepthMap:
    """Depth grid in meters with a boolean validity mask of the same shape."""

    values: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.isfinite(self.values) & (self.values > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ShapeMismatch(
                    f"valid mask shape {self.valid.shape} != depth shape {self.values.shape}"
                )

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class NormConfig:
    epsilon: float = 1.0
    p_lo: float = 2.0
    p_hi: float = 98.0
    representation: str = "log_depth"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not (0 <= self.p_lo < self.p_hi <= 100):
            raise ConfigError(f"need 0 <= p_lo < p_hi <= 100, got {self.p_lo}, {self.p_hi}")
        if self.representation not in REPRESENTATIONS:
            raise ConfigError(f"unknown representation {self.representation!r}")

    @classmethod
    def for_video(cls, **kw):
        kw.setdefault("epsilon", 1e-3)
        return cls(representation="disparity", **kw)


@dataclass(frozen=True)
class NormStats:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise DegenerateRange(f"d_min ({self.d_min}) must be below d_max ({self.d_max})")


def _as_depth(d):
    return d if isinstance(d, DepthMap) else DepthMap(d)


def to_log(d, epsilon=1.0):
    """``log(d + epsilon)`` on valid pixels; invalid pixels keep their raw value."""
    d = _as_depth(d)
    shifted = d.values + epsilon
    if np.any(shifted[d.valid] <= 0):
        raise ValueError("log transform needs d + epsilon > 0 on every valid pixel")
    out = d.values.copy()
    out[d.valid] = np.log(shifted[d.valid])
    return out


def to_disparity(d, epsilon=1e-3):
    d = _as_depth(d)
    if np.any(d.values[d.valid] <= 0):
        raise ValueError("disparity needs strictly positive depth on valid pixels")
    out = d.values.copy()
    out[d.valid] = 1.0 / (d.values[d.valid] + epsilon)
    return out


def transform(d, cfg: NormConfig):
    if cfg.representation == "log_depth":
        return to_log(d, cfg.epsilon)
    return to_disparity(d, cfg.epsilon)


def percentile_stats(transformed, valid, cfg: NormConfig) -> NormStats:
    vals = np.asarray(transformed, dtype=np.float64)[np.asarray(valid, dtype=bool)]
    if vals.size == 0:
        raise EmptyValidSet("no valid pixels to normalize")
    lo, hi = np.percentile(vals, [cfg.p_lo, cfg.p_hi])
    if hi - lo < 1e-8:
        raise DegenerateRange(f"percentile range {hi - lo:.3g} too small to normalize")
    return NormStats(float(lo), float(hi))


def apply_stats(transformed, stats: NormStats):
    x = (np.asarray(transformed, dtype=np.float64) - stats.d_min) / (stats.d_max - stats.d_min) - 0.5
    return np.clip(x, -0.5, 0.5)


def normalize(transformed, valid=None, cfg: NormConfig = NormConfig()):
    """Map a transformed depth grid into ``[-0.5, 0.5]``.

    Returns the normalized grid and the percentile stats needed to invert it.
    Invalid pixels are set to 0 in the output.
    """
    transformed = np.asarray(transformed, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(transformed)
    valid = np.asarray(valid, dtype=bool)
    stats = percentile_stats(transformed, valid, cfg)
    x = apply_stats(np.where(valid, transformed, stats.d_min), stats)
    x[~valid] = 0.0
    return x, stats


def denormalize(x, stats: NormStats, cfg: NormConfig = NormConfig()) -> DepthMap:
    """Invert :func:`normalize` and the log/disparity transform.

    Pixels that cannot be inverted to a positive depth are flagged invalid
    (their value is kept for inspection).
    """
    x = np.asarray(x, dtype=np.float64)
    t = (x + 0.5) * (stats.d_max - stats.d_min) + stats.d_min
    if cfg.representation == "log_depth":
        depth = np.exp(t) - cfg.epsilon
        valid = np.isfinite(depth) & (depth > 0)
    else:
        ok = t > 0
        with np.errstate(divide="ignore"):
            depth = np.where(ok, 1.0 / np.where(ok, t, 1.0) - cfg.epsilon, 0.0)
        valid = ok & np.isfinite(depth) & (depth > 0)
    return DepthMap(depth, valid)


def normalize_depth(d, cfg: NormConfig = NormConfig()):
    """Transform then normalize a :class:`DepthMap` (or a stack of frames)."""
    d = _as_depth(d)
    return normalize(transform(d, cfg), d.valid, cfg)
