"""High-frequency adapter: FFT low-frequency suppression feeding a patch embedding and a shared clue MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import InvalidTau, ShapeMismatch


@dataclass(frozen=True)
class HfaConfig:
    tau: float = 0.25
    hidden_dim: int = 32

    def __post_init__(self):
        check_tau(self.tau)
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")


def check_tau(tau: float) -> float:
    if not (0.0 < tau < 1.0):
        raise InvalidTau(f"tau must lie in (0, 1), got {tau}")
    return tau


def low_freq_mask(height: int, width: int, tau: float, device=None) -> torch.Tensor:
    """Boolean (H, W) mask in unshifted FFT layout; True marks suppressed bins.

    A bin is suppressed when both signed integer frequencies satisfy
    ``|f| <= side / 2`` with ``side = ceil(tau * min(H, W))``. The set is closed
    under ``f -> -f``, so the filtered signal stays real and filtering twice is
    the same as filtering once.
    """
    half = math.ceil(tau * min(height, width)) / 2
    fy = torch.fft.fftfreq(height, d=1.0 / height, device=device).abs()
    fx = torch.fft.fftfreq(width, d=1.0 / width, device=device).abs()
    return (fy[:, None] <= half) & (fx[None, :] <= half)


def extract_hfc(image: torch.Tensor, tau: float = 0.25) -> torch.Tensor:
    """Zero the centered low-frequency square of each channel's spectrum."""
    check_tau(tau)
    H, W = image.shape[-2:]
    keep = ~low_freq_mask(H, W, tau, device=image.device)
    spectrum = torch.fft.fft2(image, dim=(-2, -1))
    spectrum = spectrum * keep.to(spectrum.real.dtype)
    return torch.fft.ifft2(spectrum, dim=(-2, -1)).real.to(image.dtype)


class HighFrequencyAdapter(nn.Module):
    """Produces one clue map per image, shaped like an encoder feature map.

    The clue is ``MLP(hf_embed(extract_hfc(image)) + image_embedding)`` applied
    per spatial position (C -> hidden -> C, GELU).
    """

    def __init__(self, embed_dim: int, patch_size: int, cfg: HfaConfig = HfaConfig(), input_size: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.input_size = input_size
        self.proj = nn.Conv2d(3, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, embed_dim),
        )

    def hf_embed(self, hf_image: torch.Tensor) -> torch.Tensor:
        bad_size = self.input_size is not None and hf_image.shape[-2:] != (self.input_size, self.input_size)
        if hf_image.dim() != 4 or hf_image.shape[1] != 3 or bad_size:
            raise ShapeMismatch(f"expected (B, 3, H, W), got {tuple(hf_image.shape)}")
        return self.proj(hf_image)

    def hf_clue(self, hf_embedding: torch.Tensor, image_embedding: torch.Tensor) -> torch.Tensor:
        if hf_embedding.shape != image_embedding.shape:
            raise ShapeMismatch(f"{tuple(hf_embedding.shape)} vs {tuple(image_embedding.shape)}")
        B, C, H, W = hf_embedding.shape
        if C != self.embed_dim:
            raise ShapeMismatch(f"expected {self.embed_dim} channels, got {C}")
        tokens = (hf_embedding + image_embedding).flatten(2).transpose(1, 2)
        tokens = self.mlp(tokens)
        return tokens.transpose(1, 2).reshape(B, C, H, W)

    def forward(self, image: torch.Tensor, image_embedding: torch.Tensor) -> torch.Tensor:
        hf = extract_hfc(image, self.cfg.tau)
        return self.hf_clue(self.hf_embed(hf), image_embedding)
