"""Training objectives on top of the velocity MSE.

``gradient_matching`` penalizes differences in the spatial gradients of the
depth residual over a small image pyramid. ``rtg_loss`` compares the change
between every non-reference frame and every reference frame in prediction
and ground truth, which ties per-frame predictions to a shared offset.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ConfigError, EmptyValidSet, ShapeMismatch


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (v >= 0 and v < float("inf")):
                raise ConfigError(f"loss weight {name} must be finite and non-negative, got {v}")


def _as_batch(x):
    """Coerce ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)`` to ``(B, 1, H, W)``."""
    x = torch.as_tensor(x)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    if x.ndim == 4 and x.shape[1] == 1:
        return x
    raise ShapeMismatch(f"expected a depth grid or a batch of them, got {tuple(x.shape)}")


def _pool_masked(r, m):
    h, w = r.shape[-2:]
    r, m = r[..., : h - h % 2, : w - w % 2], m[..., : h - h % 2, : w - w % 2]
    num = F.avg_pool2d(r * m, 2)
    den = F.avg_pool2d(m, 2)
    valid = (den > 0).to(r.dtype)
    return torch.where(den > 0, num / den.clamp_min(1e-12), torch.zeros_like(num)), valid


def gradient_matching(pred, gt, valid=None, num_scales=4):
    """Multi-scale gradient-matching loss on the residual ``pred - gt``.

    At each scale the loss is the mean of ``|dx r|`` over horizontally
    adjacent valid pairs and of ``|dy r|`` over vertically adjacent valid
    pairs, averaged over the two directions. Scales are summed; each one
    average-pools the residual and the mask by 2.
    """
    pred = _as_batch(pred)
    gt = _as_batch(torch.as_tensor(gt, dtype=pred.dtype))
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    m = torch.ones_like(pred) if valid is None else _as_batch(torch.as_tensor(valid)).to(pred.dtype).expand_as(pred)
    if m.sum().item() == 0:
        raise EmptyValidSet("gradient matching mask selects no pixels")
    r = (pred - gt) * m
    total = pred.new_zeros(())
    for scale in range(num_scales):
        if scale > 0:
            if min(r.shape[-2:]) < 2:
                break
            r, m = _pool_masked(r, m)
        terms = []
        if r.shape[-1] > 1:
            mx = m[..., :, 1:] * m[..., :, :-1]
            if mx.sum() > 0:
                terms.append((torch.abs(r[..., :, 1:] - r[..., :, :-1]) * mx).sum() / mx.sum())
        if r.shape[-2] > 1:
            my = m[..., 1:, :] * m[..., :-1, :]
            if my.sum() > 0:
                terms.append((torch.abs(r[..., 1:, :] - r[..., :-1, :]) * my).sum() / my.sum())
        if terms:
            total = total + sum(terms) / 2.0
    return total


def rtg_loss(pred, gt, num_refs, valid=None):
    """Reference-aligned temporal gradient loss.

    ``pred`` and ``gt`` are ``(T, H, W)`` or ``(B, T, H, W)``. The first
    ``num_refs`` frames are references; every other frame ``j`` is compared
    to every reference ``i`` through ``(pred_j - pred_i) - (gt_j - gt_i)``,
    averaged over pixels valid in both frames and over all ``R * (T - R)``
    pairs.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if pred.ndim == 3:
        pred, gt = pred[None], gt[None]
        valid = None if valid is None else torch.as_tensor(valid)[None]
    if pred.ndim != 4:
        raise ShapeMismatch("rtg_loss expects (T, H, W) or (B, T, H, W)")
    n_frames = pred.shape[1]
    if not 1 <= num_refs < n_frames:
        raise ConfigError(f"need 1 <= R < T, got R={num_refs}, T={n_frames}")
    m = torch.ones_like(pred) if valid is None else torch.as_tensor(valid).to(pred.dtype)
    refs = range(num_refs)
    others = range(num_refs, n_frames)
    total = pred.new_zeros(())
    for j in others:
        for i in refs:
            mij = m[:, j] * m[:, i]
            count = mij.sum()
            if count.item() == 0:
                raise EmptyValidSet(f"frames {i} and {j} share no valid pixels")
            diff = (pred[:, j] - pred[:, i]) - (gt[:, j] - gt[:, i])
            total = total + (torch.abs(diff) * mij).sum() / count
    return total / (num_refs * (n_frames - num_refs))


def total_mde(velocity_mse, gm, weights: LossWeights):
    return velocity_mse + weights.alpha * gm


def total_vde(velocity_mse, gm, rtg, weights: LossWeights):
    return velocity_mse + weights.alpha * gm + weights.beta * rtg
