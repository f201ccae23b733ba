"""Sparse deformable Mamba stages: spatial, spectral and temporal.

Each stage picks a subset of tokens, runs a selective Mamba block over the
condensed sequence (original index order) and scatters the result back onto
the input tokens as a residual. Token selections are batched: ``indices`` is
``(B, m)`` padded on the right, with ``valid`` marking real entries.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ssm import SelectiveMambaBlock
from .tokens import from_spectral_tokens, to_spectral_tokens

log = logging.getLogger(__name__)

COS_EPS = 1e-7
TIE_RTOL = 1e-6


def keep_count(ratio: float, n: int) -> int:
    """``floor(ratio * n)``, guarded against float round-down (0.3*10 etc)."""
    if not 0 < ratio <= 1:
        raise ValueError(f"sparsity ratio must be in (0, 1], got {ratio}")
    k = math.floor(ratio * n + 1e-9)
    if k < 1:
        raise ValueError(f"ratio {ratio} keeps no tokens out of {n}")
    return k


@dataclass
class TokenSelection:
    indices: torch.Tensor  # (B, m) long
    valid: torch.Tensor  # (B, m) bool
    full_length: int
    ratio: float

    def kept(self, b: int = 0) -> list[int]:
        return self.indices[b][self.valid[b]].tolist()

    @property
    def counts(self) -> torch.Tensor:
        return self.valid.sum(1)

    def membership(self) -> torch.Tensor:
        member = torch.zeros(self.indices.shape[0], self.full_length, dtype=torch.bool)
        member.scatter_(1, self.indices, self.valid)
        return member


def selection_from_membership(member: torch.Tensor, ratio: float) -> TokenSelection:
    """Boolean (B, n) membership -> ascending padded index lists."""
    count = member.sum(1)
    m = max(int(count.max()), 1)
    order = torch.argsort((~member).to(torch.uint8), dim=1, stable=True)[:, :m]
    valid = torch.arange(m)[None, :] < count[:, None]
    return TokenSelection(torch.where(valid, order, 0), valid, member.shape[1], ratio)


def anchor_index(height: int, width: int) -> int:
    return (height * width - 1) // 2


def anchor_similarity(s: torch.Tensor, anchor: int | None = None, return_flags: bool = False):
    """Angle between every spatial token and the centre (anchor) token.

    ``s`` is (B, HW, D). Returns (B, HW) angles in [0, π]; the anchor's own
    angle is exactly 0. Zero-norm tokens get π/2 and are flagged.
    """
    n = s.shape[1]
    if anchor is None:
        anchor = (n - 1) // 2
    ref = s[:, anchor : anchor + 1, :]
    norms = s.norm(dim=-1)
    ref_norm = norms[:, anchor : anchor + 1]
    denom = norms * ref_norm
    degenerate = denom == 0
    cos = (s * ref).sum(-1) / torch.where(degenerate, torch.ones_like(denom), denom)
    angles = torch.arccos(cos.clamp(-1 + COS_EPS, 1 - COS_EPS))
    angles = torch.where(degenerate, torch.full_like(angles, math.pi / 2), angles)
    angles[:, anchor] = 0.0
    if degenerate.any():
        log.debug("anchor_similarity: %d zero-norm tokens", int(degenerate.sum()))
    if return_flags:
        return angles, degenerate
    return angles


def spatial_prune(s: torch.Tensor, angles: torch.Tensor, ratio: float = 0.3, order: str = "raster"):
    """Keep the ``floor(ratio*HW)`` tokens with the smallest angles.

    Ties go to the lower raster index. With ``order="raster"`` the condensed
    sequence keeps the original raster order; ``"similarity"`` orders it by
    angle instead.
    """
    n = angles.shape[1]
    k = keep_count(ratio, n)
    ranked = torch.argsort(angles, dim=1, stable=True)[:, :k]
    if order == "raster":
        ranked = ranked.sort(dim=1).values
    elif order != "similarity":
        raise ValueError(f"unknown order {order!r}")
    sel = TokenSelection(ranked, torch.ones_like(ranked, dtype=torch.bool), n, ratio)
    return sel, gather_tokens(s, sel)


def gather_tokens(tokens: torch.Tensor, sel: TokenSelection) -> torch.Tensor:
    """(B, n, D) -> (B, m, D); padded slots are zero."""
    idx = sel.indices[..., None].expand(-1, -1, tokens.shape[-1])
    out = torch.gather(tokens, 1, idx)
    return out * sel.valid[..., None].to(out.dtype)


def scatter_residual(original: torch.Tensor, condensed: torch.Tensor, sel: TokenSelection) -> torch.Tensor:
    """``out[i] = original[i] + condensed[pos(i)]`` for kept ``i``, else ``original[i]``."""
    if condensed.shape[:2] != sel.indices.shape:
        raise ValueError(
            f"condensed shape {tuple(condensed.shape[:2])} != selection {tuple(sel.indices.shape)}"
        )
    if int(sel.indices.max()) >= original.shape[1] or int(sel.indices.min()) < 0:
        raise IndexError("selection index out of range")
    src = condensed * sel.valid[..., None].to(condensed.dtype)
    idx = sel.indices[..., None].expand(-1, -1, original.shape[-1])
    return original.scatter_add(1, idx, src)


def attention_map(tokens: torch.Tensor, w_q: nn.Linear, w_k: nn.Linear) -> torch.Tensor:
    """Row-softmax ``softmax(Q Kᵀ / √d)`` over (B, n, ·) tokens -> (B, n, n)."""
    q, k = w_q(tokens), w_k(tokens)
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1)


def topk_lowest_index(scores: torch.Tensor, k: int, rtol: float = TIE_RTOL) -> torch.Tensor:
    """Indices of the k largest entries per row, ties to the lower index.

    Entries within ``rtol * max|score|`` of the k-th largest count as tied.
    Row means of a softmax map are all 1/n up to rounding, so without the
    band the selection would hinge on float noise.
    """
    kth = torch.topk(scores, k, dim=-1).values[..., -1:]
    band = rtol * scores.abs().amax(-1, keepdim=True)
    key = torch.where((scores - kth).abs() <= band, kth, scores)
    return torch.argsort(-key, dim=-1, stable=True)[..., :k]


def rowcol_topk_union(am: torch.Tensor, ratio: float = 0.3) -> tuple[TokenSelection, torch.Tensor]:
    """TopK of row means ∪ TopK of column means; returns (selection, mask).

    ``mask[i, j] = 1`` iff ``i ∈ S`` or ``j ∈ S``.
    """
    n = am.shape[-1]
    k = keep_count(ratio, n)
    row_mean = am.mean(-1)
    col_mean = am.mean(-2)
    member = torch.zeros(am.shape[0], n, dtype=torch.bool)
    member.scatter_(1, topk_lowest_index(row_mean, k), True)
    member.scatter_(1, topk_lowest_index(col_mean, k), True)
    return selection_from_membership(member, ratio), union_mask(member)


def union_mask(member: torch.Tensor) -> torch.Tensor:
    return member[:, :, None] | member[:, None, :]


class SpatialSDM(nn.Module):
    """Anchor-guided pruning -> Mamba -> scatter residual -> spatial max pool."""

    def __init__(self, latent: int, steps: int, ratio: float = 0.3, d_state: int = 16, expand: int = 2,
                 order: str = "raster", name: str = "spa"):
        super().__init__()
        self.latent, self.steps, self.ratio, self.order = latent, steps, ratio, order
        dim = latent * steps
        self.norm = nn.LayerNorm(dim)
        self.mamba = SelectiveMambaBlock(dim, d_state=d_state, expand=expand, name=f"{name}.mamba")

    def forward(self, s: torch.Tensor):
        """s: (B, HW, LT) -> (tokens (B, HW, LT), spectral tokens (B, L, T), selection)."""
        with torch.no_grad():
            angles = anchor_similarity(s)
        sel, condensed = spatial_prune(s, angles, self.ratio, self.order)
        out = scatter_residual(s, self.mamba(self.norm(condensed)), sel)
        pooled = out.max(dim=1).values
        return out, to_spectral_tokens(pooled, self.latent), sel


class SparseAttentionMamba(nn.Module):
    """Attention-scored token selection shared by the spectral and temporal stages.

    tokens (B, n, d) -> attention map -> row/column TopK union -> masked
    attention over value-projected tokens -> selected rows through Mamba ->
    scatter residual onto the input tokens.
    """

    def __init__(self, dim: int, d_attn: int = 32, ratio: float = 0.3, d_state: int = 16, expand: int = 2,
                 renorm: bool = True, name: str = "sam"):
        super().__init__()
        self.ratio, self.renorm = ratio, renorm
        self.norm = nn.LayerNorm(dim)
        self.w_q = nn.Linear(dim, d_attn, bias=False)
        self.w_k = nn.Linear(dim, d_attn, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.mamba = SelectiveMambaBlock(dim, d_state=d_state, expand=expand, name=f"{name}.mamba")

    def sparse_attention(self, am: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        sparse = am * mask.to(am.dtype)
        if self.renorm:
            sparse = sparse / sparse.sum(-1, keepdim=True)
        return sparse

    def forward(self, tokens: torch.Tensor):
        x = self.norm(tokens)
        am = attention_map(x, self.w_q, self.w_k)
        sel, mask = rowcol_topk_union(am.detach(), self.ratio)
        attended = self.sparse_attention(am, mask) @ self.w_v(x)
        condensed = gather_tokens(attended, sel)
        out = scatter_residual(tokens, self.mamba(condensed), sel)
        return out, am, sel, mask


class SpectralSDM(nn.Module):
    def __init__(self, latent: int, steps: int, d_attn: int = 32, ratio: float = 0.3, d_state: int = 16,
                 expand: int = 2, renorm: bool = True, name: str = "spe"):
        super().__init__()
        self.block = SparseAttentionMamba(steps, d_attn, ratio, d_state, expand, renorm, name=name)

    def forward(self, f: torch.Tensor, spa_out: torch.Tensor):
        """f: (B, L, T) spectral tokens, spa_out: (B, HW, LT).

        Returns (Z (B, LT, HW), updated spectral tokens (B, L, T), attention map, selection).
        """
        out, am, sel, _ = self.block(f)
        up = from_spectral_tokens(out)  # broadcast up-pool over HW
        z = (spa_out + up[:, None, :]).transpose(1, 2)
        return z, out, am, sel


class TemporalSDM(nn.Module):
    def __init__(self, latent: int, steps: int, positions: int, num_classes: int = 11, d_attn: int = 32,
                 ratio: float = 0.3, d_state: int = 16, expand: int = 2, renorm: bool = True,
                 hidden: int = 128, name: str = "tem"):
        super().__init__()
        self.steps = steps
        # one group per time step: L latent channels -> 1 salient channel
        self.compress = nn.Conv1d(latent * steps, steps, kernel_size=1, groups=steps)
        self.block = SparseAttentionMamba(positions, d_attn, ratio, d_state, expand, renorm, name=name)
        self.head = nn.Sequential(nn.Linear(steps, hidden), nn.GELU(), nn.Linear(hidden, num_classes))

    def forward(self, z: torch.Tensor):
        """z: (B, LT, HW) -> (temporal feature (B, T, HW), logits (B, K), attention map, selection)."""
        tokens = self.compress(z)
        out, am, sel, _ = self.block(tokens)
        logits = self.head(out.mean(-1))
        return out, logits, am, sel
