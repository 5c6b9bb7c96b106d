"""Box prompt encoder and two-way-attention mask decoder (single mask output)."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import LayerNorm2d
from .errors import OutOfFrame, ShapeMismatch
from .prompts import BBox

PE_SEED = 0


class PositionEmbeddingRandom(nn.Module):
    """Random Fourier features of normalized (x, y) coordinates, fixed by ``PE_SEED``."""

    def __init__(self, num_pos_feats: int, scale: float = 1.0):
        super().__init__()
        gen = torch.Generator().manual_seed(PE_SEED)
        self.register_buffer("gaussian", scale * torch.randn(2, num_pos_feats, generator=gen))

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        # coords in [0, 1], last dim (x, y)
        coords = 2 * coords - 1
        coords = 2 * math.pi * (coords @ self.gaussian.to(coords.dtype))
        return torch.cat([torch.sin(coords), torch.cos(coords)], dim=-1)

    def dense(self, size: int) -> torch.Tensor:
        """(C, size, size) encoding of cell centers."""
        c = (torch.arange(size, dtype=self.gaussian.dtype, device=self.gaussian.device) + 0.5) / size
        yy, xx = torch.meshgrid(c, c, indexing="ij")
        return self.encode(torch.stack([xx, yy], dim=-1)).permute(2, 0, 1)


class PromptEncoder(nn.Module):
    def __init__(self, embed_dim: int, input_size: int):
        super().__init__()
        if embed_dim % 2:
            raise ValueError("embed_dim must be even for the positional encoding")
        self.embed_dim = embed_dim
        self.input_size = input_size
        self.pe = PositionEmbeddingRandom(embed_dim // 2)
        self.corner_embed = nn.Parameter(torch.randn(2, embed_dim) * 0.02)  # top-left, bottom-right

    def boxes_to_tensor(self, boxes) -> torch.Tensor:
        if isinstance(boxes, BBox):
            boxes = [boxes]
        if isinstance(boxes, torch.Tensor):
            t = boxes.reshape(-1, 4).to(self.corner_embed.dtype)
        else:
            t = torch.tensor([b.as_list() if isinstance(b, BBox) else list(b) for b in boxes],
                             dtype=self.corner_embed.dtype)
        s = self.input_size
        if (t < 0).any() or (t > s).any():
            raise OutOfFrame(f"box coordinates outside [0, {s}]: {t.tolist()}")
        return t

    def encode_box(self, boxes) -> torch.Tensor:
        """(B, 2, C) corner tokens for one box per image."""
        t = self.boxes_to_tensor(boxes).to(self.corner_embed.device) / self.input_size
        corners = t.reshape(-1, 2, 2)
        return self.pe.encode(corners) + self.corner_embed

    forward = encode_box


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, downsample_rate: int = 1):
        super().__init__()
        inner = dim // downsample_rate
        if inner % num_heads:
            raise ValueError(f"inner dim {inner} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, inner)
        self.k_proj = nn.Linear(dim, inner)
        self.v_proj = nn.Linear(dim, inner)
        self.out_proj = nn.Linear(inner, dim)

    def _split(self, x):
        B, N, D = x.shape
        return x.reshape(B, N, self.num_heads, D // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = attn.softmax(dim=-1) @ v
        B, H, N, d = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(B, N, H * d))


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_dim: int, skip_first_pe: bool = False):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.t2i = Attention(dim, num_heads, downsample_rate=2)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.i2t = Attention(dim, num_heads, downsample_rate=2)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)

        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.t2i(q, k, keys))
        queries = self.norm3(queries + self.mlp(queries))

        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.i2t(k, q, queries))
        return queries, keys


class MaskDecoder(nn.Module):
    """Decodes (B, C, g, g) image features plus box tokens into (B, 1, S, S) logits."""

    def __init__(self, embed_dim: int, grid: int, input_size: int, num_heads: int = 2,
                 depth: int = 2, mlp_dim: int | None = None):
        super().__init__()
        C = embed_dim
        if C % 8:
            raise ValueError("decoder embed_dim must be divisible by 8")
        self.embed_dim, self.grid, self.input_size = C, grid, input_size
        self.prompt_encoder = PromptEncoder(C, input_size)
        self.mask_token = nn.Parameter(torch.randn(1, 1, C) * 0.02)
        mlp_dim = mlp_dim or 2 * C
        self.blocks = nn.ModuleList(
            TwoWayBlock(C, num_heads, mlp_dim, skip_first_pe=(i == 0)) for i in range(depth)
        )
        self.final_attn = Attention(C, num_heads, downsample_rate=2)
        self.norm_final = nn.LayerNorm(C)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(C, C // 4, kernel_size=2, stride=2),
            LayerNorm2d(C // 4),
            nn.GELU(),
            nn.ConvTranspose2d(C // 4, C // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hyper = nn.Sequential(nn.Linear(C, C), nn.ReLU(), nn.Linear(C, C), nn.ReLU(), nn.Linear(C, C // 8))

    def encode_box(self, boxes) -> torch.Tensor:
        return self.prompt_encoder.encode_box(boxes)

    def decode_mask(self, features: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        B, C, H, W = features.shape
        if C != self.embed_dim or H != self.grid or W != self.grid:
            raise ShapeMismatch(f"expected (B, {self.embed_dim}, {self.grid}, {self.grid}), got {tuple(features.shape)}")
        if prompt.shape[0] == 1 and B > 1:
            prompt = prompt.expand(B, -1, -1)
        tokens = torch.cat([self.mask_token.expand(B, -1, -1), prompt], dim=1)
        keys = features.flatten(2).transpose(1, 2)
        key_pe = self.prompt_encoder.pe.dense(H).to(features.dtype).flatten(1).transpose(0, 1).unsqueeze(0)

        queries = tokens
        for blk in self.blocks:
            queries, keys = blk(queries, keys, tokens, key_pe)
        q, k = queries + tokens, keys + key_pe
        queries = self.norm_final(queries + self.final_attn(q, k, keys))

        src = keys.transpose(1, 2).reshape(B, C, H, W)
        up = self.upscale(src)
        weights = self.hyper(queries[:, 0])
        logits = torch.einsum("bc,bchw->bhw", weights, up).unsqueeze(1)
        return F.interpolate(logits, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)

    def forward(self, features, boxes):
        return self.decode_mask(features, self.encode_box(boxes))


def binarize(logits: torch.Tensor, threshold: float = 0.0) -> torch.Tensor:
    return logits > threshold
