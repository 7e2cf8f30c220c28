"""Full multi-organ network: per-organ encoders, ORI after the last three stages,
HFE on the esophagus branch, ordinal heads and the fusion layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .backbone import Encoder, EncoderConfig
from .datamodel import ORGANS
from .heads import BranchHead, make_fusion
from .hfe import HierarchicalEnhancement
from .ori import OriStage


@dataclass
class ModelConfig:
    organs: tuple[str, ...] = ORGANS
    input_dims: dict = field(default_factory=lambda: {
        "esophagus": (10, 10, 25), "liver": (64, 49, 9), "spleen": (38, 49, 6),
    })
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    # per-organ stride overrides, organ -> list of per-stage (sx, sy, sz);
    # thin ROIs need small axial strides, the esophagus keeps a fine final grid
    strides: dict = field(default_factory=lambda: {
        "esophagus": ((1, 1, 2), (2, 2, 1), (1, 1, 2), (1, 1, 1)),
        "liver": ((2, 2, 2), (2, 2, 1), (2, 2, 1), (1, 1, 1)),
        "spleen": ((2, 2, 2), (2, 2, 1), (2, 2, 1), (1, 1, 1)),
    })
    fusion: str = "Concat"
    lowrank_rank: int = 4
    use_ori: bool = True
    use_hfe: bool = True
    ori_grid: tuple[int, int, int] = (4, 4, 4)
    # fixed intensity window applied to every ROI: (x - center) / scale; the
    # center sits at the phantom background so zero padding matches tissue
    intensity_center: float = 0.3
    intensity_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.organs = tuple(self.organs)
        unknown = set(self.organs) - set(ORGANS)
        if unknown:
            raise ValueError(f"unknown organs {sorted(unknown)}")
        if "esophagus" not in self.organs:
            raise ValueError("the esophagus branch is required")
        self.input_dims = {o: tuple(int(n) for n in d) for o, d in self.input_dims.items()}
        self.ori_grid = tuple(self.ori_grid)
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be > 0")

    def encoder_for(self, organ: str) -> EncoderConfig:
        if organ not in self.strides:
            return self.encoder
        d = asdict(self.encoder)
        d["strides"] = self.strides[organ]
        return EncoderConfig(**d)

    @property
    def ori_active(self) -> bool:
        return self.use_ori and len(self.organs) > 1

    def to_json(self) -> dict:
        return asdict(self)


class MoonModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        self.encoders = nn.ModuleDict({
            o: Encoder(cfg.encoder_for(o), cfg.input_dims[o]) for o in cfg.organs
        })
        n_stages = len(enc.channels)
        # ORI after each of the last three stages
        self.ori_stages = list(range(n_stages - 3, n_stages)) if cfg.ori_active else []
        partners = [o for o in cfg.organs if o != "esophagus"]
        self.ori = nn.ModuleDict({
            str(s): OriStage(enc.channels[s], enc.heads, cfg.ori_grid, partners) for s in self.ori_stages
        })
        c1, c2, c3 = enc.channels[-3:]
        self.hfe = HierarchicalEnhancement(c1, c2, c3, enc.heads) if cfg.use_hfe else None
        self.heads = nn.ModuleDict({o: BranchHead(c3) for o in cfg.organs})
        self.fusion = make_fusion(cfg.fusion, c3, cfg.organs, cfg.lowrank_rank)

    def forward(self, vols: dict[str, torch.Tensor], keep_features: bool = False) -> dict:
        """``vols`` maps organ -> (B, 1, H, W, D). Returns logits, embeddings and
        (optionally) the last-stage feature maps that get pooled into embeddings."""
        c, scale = self.cfg.intensity_center, self.cfg.intensity_scale
        feats = {o: self.encoders[o].prepare((vols[o] - c) / scale) for o in self.cfg.organs}
        eso_stages = []
        for s in range(len(self.cfg.encoder.channels)):
            feats = {o: self.encoders[o].stages[s](feats[o]) for o in self.cfg.organs}
            if s in self.ori_stages:
                feats = self.ori[str(s)](feats)
            eso_stages.append(feats["esophagus"])
        if self.hfe is not None:
            feats["esophagus"] = self.hfe(*eso_stages[-3:])
        emb = {o: f.mean(dim=(2, 3, 4)) for o, f in feats.items()}
        logits = {o: self.heads[o](emb[o]) for o in self.cfg.organs}
        out = {
            "fused": self.fusion(emb, logits, self.heads),
            "branch": logits,
            "emb": emb,
        }
        if keep_features:
            out["features"] = feats
        return out
