"""KAMamba: two un-shared spatial-spectral-temporal encoders plus a change head."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .change import ChangeHead
from .sparse import SpatialSDM, SpectralSDM, TemporalSDM
from .tokens import TemporalGroupedStem, flatten_bands_time, to_spatial_tokens


@dataclass
class ModelConfig:
    bands: int = 6
    steps: int = 23
    height: int = 13
    width: int = 13
    latent: int = 12
    num_classes: int = 11
    d_state: int = 16
    expand: int = 2
    d_spe: int = 32  # spectral attention width
    d_tem: int = 32  # temporal attention width
    sparse_ratio: float = 0.3
    cls_hidden: int = 128
    change_hidden: int = 128
    change_norm: bool = True
    per_group_stem: bool = False
    renorm_sparse_attention: bool = True
    condensed_order: str = "raster"
    parallel_heads: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class SSTEncoder(nn.Module):
    """Stem -> SpaSDM -> SpeSDM -> TemSDM for one year's cube."""

    def __init__(self, cfg: ModelConfig, name: str = "enc"):
        super().__init__()
        self.cfg = cfg
        L, T, HW = cfg.latent, cfg.steps, cfg.height * cfg.width
        self.stem = TemporalGroupedStem(cfg.bands, T, L, per_group=cfg.per_group_stem)
        self.spa = SpatialSDM(L, T, cfg.sparse_ratio, cfg.d_state, cfg.expand, cfg.condensed_order,
                              name=f"{name}.spa")
        self.spe = SpectralSDM(L, T, cfg.d_spe, cfg.sparse_ratio, cfg.d_state, cfg.expand,
                               cfg.renorm_sparse_attention, name=f"{name}.spe")
        self.tem = TemporalSDM(L, T, HW, cfg.num_classes, cfg.d_tem, cfg.sparse_ratio, cfg.d_state,
                               cfg.expand, cfg.renorm_sparse_attention, cfg.cls_hidden, name=f"{name}.tem")

    def forward(self, cube: torch.Tensor) -> dict:
        """cube: (B, C, T, H, W) normalized values."""
        s = to_spatial_tokens(self.stem(flatten_bands_time(cube)))
        spa, spectral, _ = self.spa(s)
        z, _, _, _ = self.spe(spectral, spa)
        tem, logits, _, _ = self.tem(z)
        return {"spa": spa, "spe": z, "tem": tem, "logits": logits}


class KAMamba(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.pre = SSTEncoder(cfg, name="pre")
        self.post = SSTEncoder(cfg, name="post")
        self.change = ChangeHead(cfg.latent, cfg.steps, cfg.change_hidden, cfg.change_norm)
        # parallel arm: change features come from a separate siamese encoder
        self.change_encoder = SSTEncoder(cfg, name="chg") if cfg.parallel_heads else None

    def forward(self, x_pre: torch.Tensor, x_post: torch.Tensor) -> dict:
        f_pre, f_post = self.pre(x_pre), self.post(x_post)
        if self.change_encoder is None:
            change_logits = self.change(f_pre, f_post)
        else:
            change_logits = self.change(self.change_encoder(x_pre), self.change_encoder(x_post))
        return {
            "logits_pre": f_pre["logits"],
            "logits_post": f_post["logits"],
            "change_logits": change_logits,
            "features_pre": f_pre,
            "features_post": f_post,
        }
