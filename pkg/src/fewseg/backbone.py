"""Frozen ViT-style image encoder with per-block feature taps.

Desk-scale profiles use plain global attention; the windowed attention and
relative position terms of the full-size encoder are not reproduced.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_tensors, save_tensors
from .errors import GeometryMismatch, ShapeMismatch


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    patch_size: int = 4
    embed_dim: int = 96
    num_blocks: int = 4
    num_heads: int = 3
    mlp_ratio: float = 4.0
    pretrained_weights: Optional[str] = None

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ValueError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    def geometry(self) -> dict:
        d = asdict(self)
        d.pop("pretrained_weights")
        return d


PROFILES = {
    "toy": EncoderConfig(64, 4, 96, 4, 3),
    "desk32": EncoderConfig(32, 4, 16, 2, 2),
    "sam-vit-b": EncoderConfig(1024, 16, 768, 12, 12),
}


@dataclass
class LayerFeatures:
    layers: List[torch.Tensor] = field(default_factory=list)  # F_I^1..F_I^K, each (B, C, g, g)
    embedding: Optional[torch.Tensor] = None


class LayerNorm2d(nn.Module):
    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection, (B, 3, H, W) -> (B, C, H/p, W/p)."""

    def __init__(self, patch_size: int, in_chans: int = 3, embed_dim: int = 96):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        # x: (B, C, g, g) in and out
        B, C, H, W = x.shape
        t = x.flatten(2).transpose(1, 2)
        t = t + self.attn(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).reshape(B, C, H, W)


def _vit_init(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = PROFILES["toy"]):
        super().__init__()
        self.cfg = cfg
        C, g = cfg.embed_dim, cfg.grid
        self.patch_embed = PatchEmbed(cfg.patch_size, 3, C)
        self.pos_embed = nn.Parameter(torch.zeros(1, C, g, g))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(Block(C, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks))
        self.neck = nn.Sequential(nn.Conv2d(C, C, kernel_size=1, bias=False), LayerNorm2d(C))
        self.apply(_vit_init)

    def feature_shape(self, batch: int = 1) -> tuple:
        return (batch, self.cfg.embed_dim, self.cfg.grid, self.cfg.grid)

    def check_image(self, image: torch.Tensor):
        s = self.cfg.input_size
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (s, s):
            raise ShapeMismatch(f"expected image (B, 3, {s}, {s}), got {tuple(image.shape)}")

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        self.check_image(image)
        return self.patch_embed(image) + self.pos_embed

    def forward(self, image: torch.Tensor, adapters=None) -> LayerFeatures:
        """Run all blocks; with ``adapters``, add the fused feature to each block output.

        ``adapters`` must provide ``prepare(image, x0) -> ctx`` and
        ``fused(k, features_in, ctx) -> tensor | None``. The layer-k adapters see the
        post-injection output of block k-1 (the patch embedding for k=0).
        """
        x = self.embed(image)
        ctx = adapters.prepare(image, x) if adapters is not None else None
        out = LayerFeatures()
        for k, blk in enumerate(self.blocks):
            y = blk(x)
            if adapters is not None:
                f = adapters.fused(k, x, ctx)
                if f is not None:
                    if f.shape != y.shape:
                        raise ShapeMismatch(f"adapter output {tuple(f.shape)} != block output {tuple(y.shape)}")
                    y = y + f
            out.layers.append(y)
            x = y
        out.embedding = self.neck(x)
        return out

    encode = forward


def patch_embed(encoder: ImageEncoder, image: torch.Tensor) -> torch.Tensor:
    return encoder.embed(image)


def freeze(encoder: nn.Module) -> nn.Module:
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    return encoder


def param_hash(module: nn.Module) -> str:
    """SHA-256 over parameter names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        t = t.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_encoder(encoder: ImageEncoder, path) -> None:
    save_tensors(path, {f"encoder.{k}": v for k, v in encoder.state_dict().items()}, geometry=encoder.cfg.geometry())


def load_pretrained(encoder: ImageEncoder, path) -> dict:
    """Populate ``encoder`` from a checkpoint; returns ``{"loaded": [...], "missing": [...]}``.

    Names may carry an ``encoder.`` prefix (full-model checkpoints) or none.
    """
    tensors, _ = load_tensors(path)
    if any(k.startswith("encoder.") for k in tensors):
        tensors = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
    own = encoder.state_dict()
    loaded, missing = [], []
    for name, ref in own.items():
        if name not in tensors:
            missing.append(name)
            continue
        src = tensors[name]
        if tuple(src.shape) != tuple(ref.shape):
            raise GeometryMismatch(f"{name}: checkpoint {tuple(src.shape)} vs encoder {tuple(ref.shape)}")
        loaded.append(name)
    with torch.no_grad():
        for name in loaded:
            own[name].copy_(tensors[name].to(own[name].dtype))
    return {"loaded": loaded, "missing": missing}
