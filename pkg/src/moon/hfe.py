"""Hierarchical feature enhancement for the esophagus branch.

Queries come from the intermediate map, keys from the deeper map and values
from the deepest map; the first two are average-pooled to the deepest map's
grid and brought to its channel count by 1x1x1 convolutions.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import MultiHeadAttention
from .ori import pool_to_common_grid


class HierarchicalEnhancement(nn.Module):
    def __init__(self, c1: int, c2: int, c3: int, heads: int = 4):
        super().__init__()
        if c3 % heads:
            heads = 1
        self.c3 = c3
        self.adapt1 = nn.Conv3d(c1, c3, 1)
        self.adapt2 = nn.Conv3d(c2, c3, 1)
        self.attn = MultiHeadAttention(c3, heads, out_proj=False)
        self.fuse = nn.Conv3d(c3, c3, 1)
        for conv in (self.adapt1, self.adapt2):
            nn.init.kaiming_uniform_(conv.weight, nonlinearity="linear")
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.fuse.weight)
        nn.init.zeros_(self.fuse.bias)

    def align(self, f1, f2, f3):
        grid = tuple(f3.shape[2:])
        a1 = self.adapt1(pool_to_common_grid(f1, grid))
        a2 = self.adapt2(pool_to_common_grid(f2, grid))
        if a1.shape[1] != self.c3 or a2.shape[1] != self.c3 or f3.shape[1] != self.c3:
            raise ValueError("channel mismatch after adaptation")
        return a1, a2

    def attend(self, f1, f2, f3) -> torch.Tensor:
        """Cross-attended tokens (B, N, C) before the fusion convolution."""
        a1, a2 = self.align(f1, f2, f3)
        tok = lambda t: t.flatten(2).transpose(1, 2)  # noqa: E731
        return self.attn(tok(a1), tok(a2), tok(f3))

    def forward(self, f1, f2, f3):
        b, c, *grid = f3.shape
        t = self.attend(f1, f2, f3)
        return f3 + self.fuse(t.transpose(1, 2).reshape(b, c, *grid))


def hfe_enhance(f1, f2, f3, module: HierarchicalEnhancement):
    return module(f1, f2, f3)
