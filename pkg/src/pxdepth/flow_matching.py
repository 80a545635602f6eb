"""Flow-matching core: linear interpolants, velocity targets and Euler sampling.

Samples move from clean data at ``t = 0`` to standard normal noise at
``t = 1``. Models predict the constant velocity ``x1 - x0`` and inference
integrates that field backwards from ``t = 1`` to ``t = 0``.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import torch

from .exceptions import ConfigError, EmptyValidSet, NonFiniteVelocity, ShapeMismatch

SCHEDULE_KINDS = ("uniform",)


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 20
    seed: int = 0
    schedule_kind: str = "uniform"

    def __post_init__(self):
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ConfigError(f"num_steps must be a positive integer, got {self.num_steps!r}")
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule_kind {self.schedule_kind!r}")


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_time(t):
    t_arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")


def interpolate(x0, x1, t):
    """Return ``t * x1 + (1 - t) * x0``.

    ``t`` may be a scalar or anything that broadcasts against the samples
    (for a batch, shape ``(B, 1, 1, 1)``). Works on numpy arrays and torch
    tensors alike.
    """
    _check_same_shape(x0, x1)
    _check_time(t)
    return t * x1 + (1 - t) * x0


def velocity_target(x0, x1):
    _check_same_shape(x0, x1)
    return x1 - x0


def velocity_mse(pred, target, mask=None):
    """Mean squared velocity error over valid entries.

    ``mask`` broadcasts against ``pred``; a depth-validity mask of shape
    ``(B, 1, H, W)`` is the usual case.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    _check_same_shape(pred, target)
    sq = (pred - target) ** 2
    if mask is None:
        if sq.numel() == 0:
            raise EmptyValidSet("velocity_mse over an empty tensor")
        return sq.mean()
    mask = torch.as_tensor(mask, device=pred.device).to(pred.dtype).expand_as(sq)
    count = mask.sum()
    if count.item() == 0:
        raise EmptyValidSet("velocity_mse mask selects no pixels")
    return (sq * mask).sum() / count


def timestep_schedule(cfg: SamplerConfig) -> List[float]:
    """Uniform descending time grid ``[1, ..., 0]`` with ``num_steps + 1`` points."""
    n = cfg.num_steps
    return [1.0 - i / n for i in range(n)] + [0.0]


def sample_training_times(batch_size, generator=None, dtype=torch.float32):
    return torch.rand(batch_size, generator=generator, dtype=dtype)


def euler_sample(
    model: Callable,
    condition,
    cfg: SamplerConfig,
    shape,
    dtype=torch.float32,
    noise: Optional[torch.Tensor] = None,
):
    """Integrate ``dx/dt = model(x, t, condition)`` from noise at t=1 down to t=0.

    ``model`` is called as ``model(x_t, t, condition)`` where ``t`` is a
    tensor of shape ``(B,)`` holding the current time for every sample. The
    initial noise is drawn from a generator local to this call, seeded with
    ``cfg.seed``, unless ``noise`` is passed explicitly.
    """
    if noise is None:
        gen = torch.Generator().manual_seed(int(cfg.seed))
        x = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    else:
        x = noise.clone()
    times = timestep_schedule(cfg)
    batch = x.shape[0]
    out_dtype = x.dtype
    # The state is carried in float64 so rounding does not grow with the step count.
    state = x.to(torch.float64)
    with torch.no_grad():
        for i in range(len(times) - 1):
            t_cur, t_next = times[i], times[i + 1]
            t_vec = torch.full((batch,), t_cur, dtype=out_dtype)
            v = model(state.to(out_dtype), t_vec, condition)
            if not torch.isfinite(v).all():
                raise NonFiniteVelocity(i)
            state = state + v.to(torch.float64) * (t_next - t_cur)
    return state.to(out_dtype)
