"""Feature differential module: same-stage |pre - post| features -> change logits."""
from __future__ import annotations

import torch
import torch.nn as nn


def stage_diff(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs()


def pooled_differential(spa: torch.Tensor, spe: torch.Tensor, tem: torch.Tensor) -> torch.Tensor:
    """Average-pool each differential over its spatial axis and concatenate.

    spa: (B, HW, LT), spe: (B, LT, HW), tem: (B, T, HW) -> (B, LT + LT + T).
    """
    return torch.cat([spa.mean(1), spe.mean(-1), tem.mean(-1)], dim=-1)


class ChangeHead(nn.Module):
    def __init__(self, latent: int = 12, steps: int = 23, hidden: int = 128, norm: bool = True):
        super().__init__()
        self.in_dim = 2 * latent * steps + steps
        # keeps the fused scale fixed as encoder features grow during training
        self.norm = nn.LayerNorm(self.in_dim) if norm else nn.Identity()
        self.ffn = nn.Sequential(nn.Linear(self.in_dim, hidden), nn.GELU(), nn.Linear(hidden, 2))

    def forward(self, pre: dict, post: dict) -> torch.Tensor:
        """Feature dicts with keys spa/spe/tem from the two year branches -> (B, 2) logits."""
        fused = pooled_differential(
            stage_diff(pre["spa"], post["spa"]),
            stage_diff(pre["spe"], post["spe"]),
            stage_diff(pre["tem"], post["tem"]),
        )
        return self.ffn(self.norm(fused))


def change_probability(logits: torch.Tensor) -> torch.Tensor:
    """Softmax column 1, i.e. p(changed)."""
    return torch.softmax(logits, dim=-1)[..., 1]
