"""Multi-scale feature adapter built from a channel gate and a 4-level pooling pyramid."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GridTooSmall, ShapeMismatch

PYRAMID_SIZES = (1, 2, 4, 8)


@dataclass(frozen=True)
class MsfaConfig:
    channel_reduction: int = 4
    per_layer: bool = False  # independent parameters per encoder layer

    def __post_init__(self):
        if self.channel_reduction < 1:
            raise ValueError("channel_reduction must be >= 1")

    @property
    def pyramid_sizes(self) -> tuple:
        return PYRAMID_SIZES


@lru_cache(maxsize=64)
def _bin_matrix(g: int, s: int) -> torch.Tensor:
    # row i averages input indices [floor(i*g/s), floor((i+1)*g/s))
    m = torch.zeros(s, g, dtype=torch.float64)
    for i in range(s):
        lo, hi = (i * g) // s, ((i + 1) * g) // s
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: torch.Tensor, size: int) -> torch.Tensor:
    """Average over ``size`` contiguous bins per axis with edges at floor(i*g/size)."""
    H, W = x.shape[-2:]
    if size > H or size > W:
        raise GridTooSmall(f"cannot pool {H}x{W} to {size}x{size}")
    rows = _bin_matrix(H, size).to(x)
    cols = _bin_matrix(W, size).to(x)
    return torch.einsum("ih,bchw,jw->bcij", rows, x, cols)


def pyramid_pool(feature: torch.Tensor, sizes=PYRAMID_SIZES) -> list[torch.Tensor]:
    if feature.dim() != 4:
        raise ShapeMismatch(f"expected (B, C, g, g), got {tuple(feature.shape)}")
    g = min(feature.shape[-2:])
    if g < max(sizes):
        raise GridTooSmall(f"grid {g} smaller than pyramid level {max(sizes)}")
    return [adaptive_avg_pool(feature, s) for s in sizes]


class ChannelGate(nn.Module):
    """Squeeze-excitation gate: GAP -> C/r -> C -> sigmoid, then channel rescale."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(-2, -1))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)[:, :, None, None]


class MultiScaleAdapter(nn.Module):
    def __init__(self, embed_dim: int, cfg: MsfaConfig = MsfaConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.channel = ChannelGate(embed_dim, cfg.channel_reduction)
        # per-channel 1x1 projection applied after the level sum
        self.proj_weight = nn.Parameter(torch.ones(embed_dim))
        self.proj_bias = nn.Parameter(torch.zeros(embed_dim))

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.embed_dim:
            raise ShapeMismatch(f"expected (B, {self.embed_dim}, g, g), got {tuple(x.shape)}")

    def channel_process(self, feature: torch.Tensor) -> torch.Tensor:
        self._check(feature)
        return self.channel(feature)

    def fuse_pyramid(self, levels, target: int) -> torch.Tensor:
        if len(levels) != len(PYRAMID_SIZES):
            raise ShapeMismatch(f"expected {len(PYRAMID_SIZES)} levels, got {len(levels)}")
        total = 0
        for lvl in levels:
            self._check(lvl)
            total = total + F.interpolate(lvl, size=(target, target), mode="bilinear", align_corners=False)
        return total * self.proj_weight[:, None, None] + self.proj_bias[:, None, None]

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        gated = self.channel_process(feature)
        return self.fuse_pyramid(pyramid_pool(gated), feature.shape[-1])

    msfa_forward = forward
