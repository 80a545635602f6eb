"""Cascade diffusion transformer operating directly on pixels.

Tensors are channel-first and batched: images ``(B, 3, H, W)``, noisy depth
``(B, 1, H, W)``, tokens ``(B, L, D)``. A token grid is carried alongside as a
``(rows, cols)`` tuple.

The network has two stages. The coarse stage patchifies the concatenated
input with a large patch, the fine stage works on four times as many tokens
produced by :class:`TokenExpander`. Semantic features are fused once at the
entry of the fine stage. For clips, every fine-stage block sees the frame's
own tokens followed by pooled reference-frame tokens.
"""
import contextlib
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigError, NonFiniteActivation, ShapeMismatch
from .video import RGTPConfig, rgtp_block, select_references


@dataclass
class ModelConfig:
    num_blocks: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    coarse_patch: int = 16
    fine_patch: int = 8
    mlp_ratio: float = 4.0
    image_channels: int = 3
    semantic_dim: int = 64
    use_semantics: bool = True
    time_freq_dim: int = 256
    # "x0": the head predicts clean depth, converted to v = (x_t - x0) / max(t, t_min)
    # "velocity": the head predicts v directly
    prediction: str = "x0"
    t_min: float = 0.05

    def __post_init__(self):
        if self.num_blocks < 2 or self.num_blocks % 2:
            raise ConfigError(f"num_blocks must be an even number >= 2, got {self.num_blocks}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("num_heads must divide hidden_dim")
        if self.coarse_patch != 2 * self.fine_patch:
            raise ConfigError("coarse_patch must be exactly twice fine_patch")
        if self.hidden_dim % 4:
            raise ConfigError("hidden_dim must be divisible by 4 for 2-D positional encoding")
        if self.time_freq_dim % 2:
            raise ConfigError("time_freq_dim must be even")
        if self.prediction not in ("x0", "velocity"):
            raise ConfigError(f"prediction must be 'x0' or 'velocity', got {self.prediction!r}")
        if not 0 < self.t_min <= 1:
            raise ConfigError("t_min must lie in (0, 1]")

    @property
    def in_channels(self):
        return 1 + self.image_channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# reshapes


def patchify(x: torch.Tensor, p: int):
    """Split ``(B, C, H, W)`` into row-major ``p x p`` patches.

    Returns ``(B, L, p*p*C)`` patches, each flattened in ``(row, col, channel)``
    order, and the patch grid ``(H // p, W // p)``.
    """
    x = torch.as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"patchify expects (B, C, H, W), got {tuple(x.shape)}")
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeMismatch(f"spatial size {h}x{w} is not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = x.reshape(b, c, rows, p, cols, p).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, rows * cols, p * p * c), (rows, cols)


def unpatchify(patches: torch.Tensor, p: int, grid: Tuple[int, int], channels: int):
    patches = torch.as_tensor(patches)
    rows, cols = grid
    if patches.ndim != 3:
        raise ShapeMismatch(f"unpatchify expects (B, L, p*p*C), got {tuple(patches.shape)}")
    b, length, width = patches.shape
    if length != rows * cols:
        raise ShapeMismatch(f"{length} patches do not fill a {rows}x{cols} grid")
    if width != p * p * channels:
        raise ShapeMismatch(f"patch width {width} != {p}*{p}*{channels}")
    x = patches.reshape(b, rows, cols, p, p, channels).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, channels, rows * p, cols * p)


# ---------------------------------------------------------------------------
# embeddings


def timestep_embed(t, dim: int, max_period: float = 10000.0, time_scale: float = 1000.0):
    """Interleaved sinusoidal embedding: ``[sin(w0 t), cos(w0 t), sin(w1 t), ...]``.

    ``t`` in [0, 1] is stretched by ``time_scale`` so the fastest frequency
    completes many periods across the unit interval.
    """
    if dim % 2:
        raise ConfigError(f"timestep embedding dim must be even, got {dim}")
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    dtype = t.dtype if t.is_floating_point() else torch.float32
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = (t.to(dtype) * time_scale)[:, None] * freqs[None]
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t.shape[0], dim)


def _sincos_1d(dim, pos):
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed_2d(dim: int, grid: Tuple[int, int]) -> np.ndarray:
    """Fixed 2-D sin/cos positional table of shape ``(rows*cols, dim)``."""
    rows, cols = grid
    gy, gx = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, gy), _sincos_1d(dim // 2, gx)], axis=1)


def pos_embed(dim, grid, like: torch.Tensor):
    return torch.from_numpy(sincos_pos_embed_2d(dim, grid)).to(dtype=like.dtype, device=like.device)


# ---------------------------------------------------------------------------
# attention instrumentation


class _AttentionTrace:
    def __init__(self):
        self.lengths = []

    @property
    def peak(self):
        return max(self.lengths) if self.lengths else 0


_active_traces = []


@contextlib.contextmanager
def attention_trace():
    """Record the sequence length of every attention call made inside the block."""
    trace = _AttentionTrace()
    _active_traces.append(trace)
    try:
        yield trace
    finally:
        _active_traces.remove(trace)


# ---------------------------------------------------------------------------
# layers


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        for trace in _active_traces:
            trace.lengths.append(n)
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim_in, hidden, dim_out):
        super().__init__()
        self.fc1 = nn.Linear(dim_in, hidden)
        self.fc2 = nn.Linear(hidden, dim_out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    """Self-attention + MLP block with adaLN-Zero timestep conditioning."""

    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dim)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, c):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        if not torch.isfinite(x).all():
            raise NonFiniteActivation("non-finite activations in DiT block")
        return x


def dit_block(x, t_embed, block: DiTBlock):
    """Functional wrapper: apply ``block`` to tokens ``x`` under conditioning ``t_embed``."""
    return block(x, t_embed)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim, freq_dim=256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        return self.mlp(timestep_embed(t, self.freq_dim).to(self.mlp[0].weight.dtype))


class TokenExpander(nn.Module):
    """Per-token linear ``D -> 4D`` followed by a 2x2 spatial unfold.

    Token ``(i, j)`` on a ``(r, c)`` grid becomes tokens ``(2i, 2j)``,
    ``(2i, 2j+1)``, ``(2i+1, 2j)``, ``(2i+1, 2j+1)`` on the ``(2r, 2c)`` grid,
    taken in that order from the four ``D``-wide chunks of the projection.
    """

    def __init__(self, dim):
        super().__init__()
        self.proj = nn.Linear(dim, 4 * dim)

    def forward(self, x, grid):
        return expand_tokens(x, grid, self.proj)


def expand_tokens(x, grid, proj: nn.Linear):
    b, n, d = x.shape
    rows, cols = grid
    if n != rows * cols:
        raise ShapeMismatch(f"{n} tokens do not fill a {rows}x{cols} grid")
    y = proj(x)
    if y.shape[-1] != 4 * d:
        raise ShapeMismatch("expansion projection must map D -> 4D")
    y = y.reshape(b, rows, cols, 2, 2, d).permute(0, 1, 3, 2, 4, 5)
    return y.reshape(b, 4 * n, d), (2 * rows, 2 * cols)


class FinalLayer(nn.Module):
    def __init__(self, dim, patch, out_channels):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, patch * patch * out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        for lin in (self.linear, self.adaLN_modulation[-1]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


# ---------------------------------------------------------------------------
# model


class CascadeDiT(nn.Module):
    """Velocity network ``v(x_t, t, image, semantics)`` with a coarse->fine cascade."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        from .semantics import SemanticFusion

        self.config = config
        cfg = config
        d = cfg.hidden_dim
        self.patch_embed = nn.Linear(cfg.coarse_patch ** 2 * cfg.in_channels, d)
        bound = 1.0 / math.sqrt(self.patch_embed.in_features)
        nn.init.uniform_(self.patch_embed.weight, -bound, bound)
        nn.init.zeros_(self.patch_embed.bias)
        self.t_embedder = TimestepEmbedder(d, cfg.time_freq_dim)
        half = cfg.num_blocks // 2
        self.coarse_blocks = nn.ModuleList(DiTBlock(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(half))
        self.expander = TokenExpander(d)
        self.fusion = SemanticFusion(d, cfg.semantic_dim) if cfg.use_semantics else None
        self.fine_blocks = nn.ModuleList(DiTBlock(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(half))
        self.final = FinalLayer(d, cfg.fine_patch, 1)

    # stages ---------------------------------------------------------------

    def _coarse(self, x_t, image, c):
        cfg = self.config
        a = torch.cat([x_t, image], dim=1)
        patches, grid = patchify(a, cfg.coarse_patch)
        z = self.patch_embed(patches)
        z = z + pos_embed(cfg.hidden_dim, grid, z)
        for block in self.coarse_blocks:
            z = block(z, c)
        return z, grid

    def _enter_fine(self, z, grid, semantics):
        z, grid = self.expander(z, grid)
        z = z + pos_embed(self.config.hidden_dim, grid, z)
        if self.fusion is not None:
            if semantics is None:
                raise ConfigError("model was built with semantic fusion; semantics are required")
            z = self.fusion(z, grid, semantics)
        return z, grid

    def _head(self, z, grid, c, x_t, t):
        out = unpatchify(self.final(z, c), self.config.fine_patch, grid, 1)
        if self.config.prediction == "velocity":
            return out
        denom = t.to(out.dtype).clamp_min(self.config.t_min).reshape(-1, 1, 1, 1)
        return (x_t - out) / denom

    def _check_input(self, x_t, image):
        h, w = x_t.shape[-2:]
        p = self.config.coarse_patch
        if h % p or w % p:
            raise ShapeMismatch(
                f"input {h}x{w} is not divisible by the coarse patch {p}; pad to a multiple of {p}"
            )
        if image.shape[-2:] != x_t.shape[-2:]:
            raise ShapeMismatch("image and noisy depth must share spatial size")

    # entry points ---------------------------------------------------------

    def forward_mde(self, x_t, image, t, semantics=None):
        """Per-image velocity. ``semantics`` is a :class:`SemanticFeatures` batch."""
        self._check_input(x_t, image)
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(x_t.shape[0])
        c = self.t_embedder(t)
        z, grid = self._coarse(x_t, image, c)
        z, grid = self._enter_fine(z, grid, semantics)
        for block in self.fine_blocks:
            z = block(z, c)
        return self._head(z, grid, c, x_t, t)

    def forward_vde(self, x_t, image, t, semantics=None, rgtp: Optional[RGTPConfig] = None):
        """Clip velocity with reference-guided token propagation.

        ``x_t`` is ``(B, T, 1, H, W)``, ``image`` ``(B, T, 3, H, W)`` and ``t``
        ``(B,)``; semantics hold ``B*T`` frames in clip-major order.
        """
        rgtp = rgtp or RGTPConfig()
        b, n_frames = x_t.shape[:2]
        select_references(n_frames, rgtp.num_refs)
        flat_x = x_t.reshape(b * n_frames, *x_t.shape[2:])
        flat_img = image.reshape(b * n_frames, *image.shape[2:])
        self._check_input(flat_x, flat_img)
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(b)
        c = self.t_embedder(t)
        c_frames = c.repeat_interleave(n_frames, dim=0)
        z, grid = self._coarse(flat_x, flat_img, c_frames)
        z, grid = self._enter_fine(z, grid, semantics)
        z = z.reshape(b, n_frames, *z.shape[1:])
        for block in self.fine_blocks:
            z = rgtp_block(z, grid, c, block, rgtp)
        z = z.reshape(b * n_frames, *z.shape[2:])
        v = self._head(z, grid, c_frames, flat_x, t.repeat_interleave(n_frames))
        return v.reshape(b, n_frames, *v.shape[1:])

    def forward(self, x_t, image, t, semantics=None):
        return self.forward_mde(x_t, image, t, semantics)

    def token_counts(self, height, width):
        p = self.config.coarse_patch
        q = self.config.fine_patch
        return (height // p) * (width // p), (height // q) * (width // q)


def forward_mde(image, x_t, t, semantics, model: CascadeDiT):
    return model.forward_mde(x_t, image, t, semantics)


def forward_vde(frames, noises, t, semantics, model: CascadeDiT, rgtp: Optional[RGTPConfig] = None):
    return model.forward_vde(noises, frames, t, semantics, rgtp)


def parameter_registry(model: nn.Module):
    """Flat ``{module_path.param: tensor}`` mapping of every learnable weight."""
    return dict(model.named_parameters())


def conv_modules(model: nn.Module):
    conv_types = (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d)
    return [name for name, m in model.named_modules() if isinstance(m, conv_types)]
