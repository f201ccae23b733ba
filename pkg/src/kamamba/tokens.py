"""Temporal grouped stem and the token layouts carried between stages.

Layout contract for stem features: channel ``c`` of an ``(L*T, H, W)`` grid
holds time step ``c // L`` and latent channel ``c % L``.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def flatten_bands_time(x: torch.Tensor) -> torch.Tensor:
    """(B, C, T, H, W) cube -> (B, T*C, H, W) with channel ``t*C + band``."""
    if x.ndim != 5:
        raise ValueError(f"expected (B, C, T, H, W), got {tuple(x.shape)}")
    b, c, t, h, w = x.shape
    return x.permute(0, 2, 1, 3, 4).reshape(b, t * c, h, w)


class TemporalGroupedStem(nn.Module):
    """GELU(BN(grouped 3x3 conv)) with one group per time step.

    Each frame's ``bands`` channels map to ``latent`` channels. By default the
    6->L kernel is shared across all T groups.
    """

    def __init__(self, bands: int = 6, steps: int = 23, latent: int = 12, per_group: bool = False):
        super().__init__()
        self.bands, self.steps, self.latent = bands, steps, latent
        self.per_group = per_group
        groups = steps if per_group else 1
        self.weight = nn.Parameter(torch.empty(groups * latent, bands, 3, 3))
        self.bias = nn.Parameter(torch.zeros(groups * latent))
        nn.init.kaiming_uniform_(self.weight, a=5**0.5)
        self.norm = nn.BatchNorm2d(steps * latent)

    def conv(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] % self.steps != 0:
            raise ValueError(f"channel count {x.shape[1]} not divisible by T={self.steps}")
        if x.shape[1] != self.steps * self.bands:
            raise ValueError(f"expected {self.steps * self.bands} channels, got {x.shape[1]}")
        weight, bias = self.weight, self.bias
        if not self.per_group:
            weight = weight.repeat(self.steps, 1, 1, 1)
            bias = bias.repeat(self.steps)
        return F.conv2d(x, weight, bias, padding=1, groups=self.steps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.norm(self.conv(x)))


def to_spatial_tokens(f: torch.Tensor) -> torch.Tensor:
    """(B, LT, H, W) -> (B, HW, LT); token ``h*W + w`` is pixel (h, w)."""
    return f.flatten(2).transpose(1, 2)


def from_spatial_tokens(s: torch.Tensor, height: int, width: int) -> torch.Tensor:
    if s.shape[1] != height * width:
        raise ValueError(f"expected {height * width} tokens, got {s.shape[1]}")
    return s.transpose(1, 2).reshape(s.shape[0], s.shape[2], height, width)


def to_spectral_tokens(pooled: torch.Tensor, latent: int) -> torch.Tensor:
    """(B, L*T) pooled vector -> (B, L, T) with ``out[l, t] = pooled[t*L + l]``."""
    if pooled.shape[-1] % latent != 0:
        raise ValueError(f"length {pooled.shape[-1]} not divisible by L={latent}")
    steps = pooled.shape[-1] // latent
    return pooled.reshape(*pooled.shape[:-1], steps, latent).transpose(-1, -2)


def from_spectral_tokens(f: torch.Tensor) -> torch.Tensor:
    """(B, L, T) -> (B, L*T); inverse of :func:`to_spectral_tokens`."""
    return f.transpose(-1, -2).flatten(-2)


def to_temporal_tokens(z: torch.Tensor) -> torch.Tensor:
    """(B, T, H, W) single-channel-per-step maps -> (B, T, HW)."""
    if z.ndim != 4:
        raise ValueError(f"expected (B, T, H, W), got {tuple(z.shape)}")
    return z.flatten(2)


def from_temporal_tokens(z: torch.Tensor, height: int, width: int) -> torch.Tensor:
    if z.shape[-1] != height * width:
        raise ValueError(f"expected {height * width} positions, got {z.shape[-1]}")
    return z.reshape(*z.shape[:-1], height, width)
