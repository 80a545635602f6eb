"""Clip-level consistency: reference-guided token propagation and consistent semantics.

Each frame keeps its own attention window; temporal information flows only
through a handful of pooled reference tokens appended before every
fine-stage block. Attention cost is therefore linear in the clip length.
"""
from dataclasses import dataclass
from typing import List, Tuple

import torch

from .exceptions import ConfigError, ShapeMismatch


@dataclass
class RGTPConfig:
    pi: int = 4
    num_refs: int = 3

    def __post_init__(self):
        if self.pi < 1 or self.num_refs < 1:
            raise ConfigError("pi and num_refs must be positive")


def select_references(num_frames: int, num_refs: int) -> List[int]:
    """Reference frames are the first ``num_refs`` frames of a clip."""
    if num_refs < 1 or num_refs >= num_frames:
        raise ConfigError(f"need 1 <= R < T, got R={num_refs}, T={num_frames}")
    return list(range(num_refs))


def downsample_ref_tokens(ref: torch.Tensor, grid: Tuple[int, int], pi: int):
    """Average-pool a ``(B, L, D)`` token grid by ``pi`` along each axis."""
    rows, cols = grid
    if rows % pi or cols % pi:
        raise ShapeMismatch(f"token grid {rows}x{cols} is not divisible by pi={pi}")
    b, n, d = ref.shape
    if n != rows * cols:
        raise ShapeMismatch(f"{n} tokens do not fill a {rows}x{cols} grid")
    if pi == 1:
        return ref, grid
    pooled = ref.reshape(b, rows // pi, pi, cols // pi, pi, d).mean(dim=(2, 4))
    return pooled.reshape(b, -1, d), (rows // pi, cols // pi)


def rgtp_block(frame_tokens, grid, t_embed, block, rgtp: RGTPConfig):
    """Run one DiT block per frame with pooled reference tokens appended.

    ``frame_tokens`` is ``(B, T, L, D)``. The reference frames' current
    tokens are averaged over frames, pooled by ``pi`` and appended to every
    frame (references included), so each attention call sees
    ``L + L / pi**2`` tokens regardless of ``T``. The appended positions are
    dropped after the block. ``t_embed`` is ``(B, D)`` or ``(B*T, D)``.
    """
    if frame_tokens.ndim != 4:
        raise ShapeMismatch("rgtp_block expects (B, T, L, D) tokens")
    b, n_frames, n, d = frame_tokens.shape
    refs = select_references(n_frames, rgtp.num_refs)
    ref = frame_tokens[:, refs].mean(dim=1)
    ref_small, _ = downsample_ref_tokens(ref, grid, rgtp.pi)
    m = ref_small.shape[1]
    aug = torch.cat([frame_tokens, ref_small[:, None].expand(b, n_frames, m, d)], dim=2)
    if t_embed.shape[0] == b and n_frames > 1:
        t_embed = t_embed.repeat_interleave(n_frames, dim=0)
    out = block(aug.reshape(b * n_frames, n + m, d), t_embed)
    return out.reshape(b, n_frames, n + m, d)[:, :, :n]


class StubConsistentEncoder:
    """Per-frame encoder followed by blending each frame towards the clip mean.

    ``features_k <- (1 - blend) * features_k + blend * mean_k(features)``.
    Stands in for a multi-view geometry encoder: deterministic, frozen and
    more correlated across frames than independent per-frame encodings.
    """

    def __init__(self, frame_encoder=None, blend=0.5):
        from .semantics import TinyEncoder

        self.frame_encoder = frame_encoder or TinyEncoder()
        self.blend = blend
        self.dim = self.frame_encoder.dim
        self.downsample = self.frame_encoder.downsample

    def __call__(self, frames):
        """``frames`` is ``(B, T, 3, H, W)`` or ``(T, 3, H, W)``; returns ``B*T`` features."""
        from .semantics import SemanticFeatures

        frames = torch.as_tensor(frames)
        if frames.ndim == 4:
            frames = frames[None]
        b, n_frames = frames.shape[:2]
        sem = self.frame_encoder(frames.reshape(b * n_frames, *frames.shape[2:]))
        feats = sem.features.reshape(b, n_frames, *sem.features.shape[1:])
        blended = (1 - self.blend) * feats + self.blend * feats.mean(dim=1, keepdim=True)
        return SemanticFeatures(blended.reshape(b * n_frames, *feats.shape[2:]), sem.grid)

    def parameters(self):
        return self.frame_encoder.parameters()


def stub_consistent_encoder(clip_frames, encoder=None):
    return (encoder or StubConsistentEncoder())(clip_frames)


def plan_windows(num_frames: int, window: int, num_refs: int):
    """Split a long clip into windows of ``window`` frames overlapping by ``num_refs``.

    Returns ``[(start, stop), ...]``. Each window after the first starts with
    the last ``num_refs`` frames of its predecessor, which serve as its
    references. The final window is shifted back so it is full length.
    """
    if num_frames <= window:
        return [(0, num_frames)]
    if not 1 <= num_refs < window:
        raise ConfigError("need 1 <= R < window length")
    stride = window - num_refs
    windows = []
    start = 0
    while True:
        stop = start + window
        if stop >= num_frames:
            windows.append((num_frames - window, num_frames))
            break
        windows.append((start, stop))
        start += stride
    return windows
