"""Per-layer selection between the high-frequency and multi-scale streams.

    fused = (w1 * F_f + b1) + (w2 * F_p + b2),   (w1, w2) = softmax(linear(GAP(F_I^k)))
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import NonFiniteInput, ShapeMismatch

BIAS_INIT = (0.0, 1.0)


def fuse(F_f: torch.Tensor, F_p: torch.Tensor, w: torch.Tensor, b) -> torch.Tensor:
    """Biased weighted sum. ``w`` is (B, 2) or (2,); ``b`` is a length-2 tensor/sequence."""
    if F_f.shape != F_p.shape:
        raise ShapeMismatch(f"{tuple(F_f.shape)} vs {tuple(F_p.shape)}")
    w = torch.as_tensor(w, dtype=F_f.dtype, device=F_f.device)
    b = torch.as_tensor(b, dtype=F_f.dtype, device=F_f.device)
    if w.dim() == 1:
        w = w.unsqueeze(0)
    extra = (1,) * (F_f.dim() - 1)
    w1 = w[:, 0].reshape(-1, *extra)
    w2 = w[:, 1].reshape(-1, *extra)
    return (w1 * F_f + b[0]) + (w2 * F_p + b[1])


class Selector(nn.Module):
    """Decision layer plus bias pair for one encoder layer.

    The decision layer starts at zero so the initial weights are (0.5, 0.5).
    With ``learn_bias=False`` the bias pair is a fixed (0, 0) buffer.
    """

    def __init__(self, embed_dim: int, learn_bias: bool = True):
        super().__init__()
        self.embed_dim = embed_dim
        self.decision = nn.Linear(embed_dim, 2)
        nn.init.zeros_(self.decision.weight)
        nn.init.zeros_(self.decision.bias)
        self.learn_bias = learn_bias
        if learn_bias:
            self.bias = nn.Parameter(torch.tensor(BIAS_INIT))
        else:
            self.register_buffer("bias", torch.zeros(2))

    def logits(self, F_I_k: torch.Tensor) -> torch.Tensor:
        if F_I_k.dim() != 4 or F_I_k.shape[1] != self.embed_dim:
            raise ShapeMismatch(f"expected (B, {self.embed_dim}, g, g), got {tuple(F_I_k.shape)}")
        if not torch.isfinite(F_I_k).all():
            raise NonFiniteInput("selector input contains NaN or Inf")
        return self.decision(F_I_k.mean(dim=(-2, -1)))

    def select_weights(self, F_I_k: torch.Tensor) -> torch.Tensor:
        """(B, 2) softmax weights; each row sums to one."""
        return torch.softmax(self.logits(F_I_k), dim=-1)

    def forward(self, F_I_k, F_f, F_p):
        return fuse(F_f, F_p, self.select_weights(F_I_k), self.bias)

    selector_forward = forward
