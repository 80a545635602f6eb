"""Semantic prompting: frozen encoder features fused into fine-stage tokens."""
import importlib.util
from dataclasses import dataclass
from typing import Protocol, Tuple, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigError, ShapeMismatch


@dataclass
class SemanticFeatures:
    """Encoder tokens ``(B, T', D')`` laid out on a ``(rows, cols)`` grid."""

    features: torch.Tensor
    grid: Tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid
        if self.features.ndim == 2:
            self.features = self.features[None]
        if self.features.shape[1] != rows * cols:
            raise ShapeMismatch(f"{self.features.shape[1]} semantic tokens do not fill grid {self.grid}")

    def __getitem__(self, idx):
        feats = self.features[idx]
        return SemanticFeatures(feats if feats.ndim == 3 else feats[None], self.grid)

    def to(self, *args, **kwargs):
        return SemanticFeatures(self.features.to(*args, **kwargs), self.grid)

    @staticmethod
    def cat(items):
        items = list(items)
        return SemanticFeatures(torch.cat([it.features for it in items]), items[0].grid)


@runtime_checkable
class SemanticEncoder(Protocol):
    """Anything mapping ``(B, 3, H, W)`` images in [0, 1] to :class:`SemanticFeatures`."""

    dim: int
    downsample: int

    def __call__(self, images: torch.Tensor) -> SemanticFeatures: ...


def l2_normalize_tokens(e):
    """Scale every token to unit L2 norm; near-zero tokens become exactly zero."""
    feats = e.features if isinstance(e, SemanticFeatures) else torch.as_tensor(e)
    norm = feats.norm(dim=-1, keepdim=True)
    out = torch.where(norm < 1e-12, torch.zeros_like(feats), feats / norm.clamp_min(1e-12))
    return SemanticFeatures(out, e.grid) if isinstance(e, SemanticFeatures) else out


def bilinear_resample(features, src_grid, dst_grid):
    """Resample ``(B, rows*cols, D)`` tokens onto another grid (half-pixel centers)."""
    b, n, d = features.shape
    rows, cols = src_grid
    if rows * cols == 0:
        raise ShapeMismatch("empty semantic grid")
    if tuple(src_grid) == tuple(dst_grid):
        return features
    img = features.transpose(1, 2).reshape(b, d, rows, cols)
    out = F.interpolate(img, size=tuple(dst_grid), mode="bilinear", align_corners=False)
    return out.reshape(b, d, -1).transpose(1, 2)


class SemanticFusion(nn.Module):
    """``z' = z + MLP(z ++ resample(normalize(e)))``, a no-op at initialization."""

    def __init__(self, dim, semantic_dim, hidden_mult=4):
        super().__init__()
        self.semantic_dim = semantic_dim
        self.fc1 = nn.Linear(dim + semantic_dim, hidden_mult * dim)
        self.fc2 = nn.Linear(hidden_mult * dim, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, z, grid, semantics: SemanticFeatures):
        return align_and_fuse(z, grid, semantics, self)


def align_and_fuse(z, grid, semantics: SemanticFeatures, fusion: SemanticFusion):
    feats = semantics.features
    if feats.shape[1] == 0:
        raise ShapeMismatch("empty semantic grid")
    if feats.shape[0] != z.shape[0]:
        raise ShapeMismatch(f"semantic batch {feats.shape[0]} != token batch {z.shape[0]}")
    if feats.shape[-1] != fusion.semantic_dim:
        raise ShapeMismatch(f"semantic dim {feats.shape[-1]} != expected {fusion.semantic_dim}")
    e_hat = l2_normalize_tokens(feats.to(z.dtype))
    aligned = bilinear_resample(e_hat, semantics.grid, grid)
    h = fusion.fc2(F.gelu(fusion.fc1(torch.cat([z, aligned], dim=-1))))
    return z + h


class _EncoderBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TinyEncoder(nn.Module):
    """Small frozen ViT used as a stand-in semantic encoder.

    Weights come from a fixed seed, so two instances are identical. Output
    grid is ``(H/16, W/16)`` with 64-dim final-layer tokens.
    """

    dim = 64
    downsample = 16

    def __init__(self, seed=1234, depth=2, heads=4):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.embed = nn.Linear(3 * self.downsample ** 2, self.dim)
            self.blocks = nn.ModuleList(_EncoderBlock(self.dim, heads) for _ in range(depth))
        finally:
            torch.random.set_rng_state(gen_state)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # frozen: stays in eval mode regardless of the parent
        return super().train(False)

    @torch.no_grad()
    def forward(self, images):
        from .dit import patchify, pos_embed

        images = torch.as_tensor(images, dtype=self.embed.weight.dtype)
        patches, grid = patchify(images, self.downsample)
        x = self.embed(patches)
        x = x + pos_embed(self.dim, grid, x)
        for block in self.blocks:
            x = block(x)
        return SemanticFeatures(x, grid)


def tiny_encoder(image, encoder=None):
    """Encode one ``(H, W, 3)`` image or a ``(B, 3, H, W)`` batch with the tiny encoder."""
    enc = encoder or _default_tiny()
    img = torch.as_tensor(image, dtype=torch.float32)
    if img.ndim == 3 and img.shape[-1] == 3:
        img = img.permute(2, 0, 1)[None]
    return enc(img)


_TINY = None


def _default_tiny():
    global _TINY
    if _TINY is None:
        _TINY = TinyEncoder()
    return _TINY


def load_encoder(name: str):
    """Resolve an encoder spec: ``"tiny"`` or ``"external:<path.py>"``.

    An external file must define ``build_encoder()`` returning an object that
    satisfies :class:`SemanticEncoder`.
    """
    if name == "tiny":
        return TinyEncoder()
    if name.startswith("external:"):
        path = name.split(":", 1)[1]
        spec = importlib.util.spec_from_file_location("pxdepth_external_encoder", path)
        if spec is None or spec.loader is None:
            raise ConfigError(f"cannot load encoder module {path!r}")
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
        if not hasattr(module, "build_encoder"):
            raise ConfigError(f"{path} does not define build_encoder()")
        enc = module.build_encoder()
        if not isinstance(enc, SemanticEncoder):
            raise ConfigError(f"{path}: build_encoder() result lacks dim/downsample/__call__")
        if isinstance(enc, nn.Module):
            enc.requires_grad_(False)
            enc.eval()
        return enc
    raise ConfigError(f"unknown encoder {name!r}; expected 'tiny' or 'external:<path>'")


def cosine_similarity_tokens(a: SemanticFeatures, b: SemanticFeatures):
    return F.cosine_similarity(a.features, b.features, dim=-1)


def encoder_param_snapshot(encoder):
    if not isinstance(encoder, nn.Module):
        return {}
    return {k: v.detach().clone() for k, v in encoder.state_dict().items()}
