"""Organ representation interaction: cross-organ attention on a shared pooled grid.

Each pair (esophagus, X) is pooled to a common grid, concatenated along
channels into 2C-dim tokens, mixed by multi-head self-attention over every
grid position, projected by a bias-free 2C x 2C matrix, split back into two
C-channel halves, refined by 1x1x1 convolutions and interpolated back to
each organ's own stage resolution. The results are residual deltas.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import MultiHeadAttention


def _block_matrix(n: int, m: int, dtype, device) -> torch.Tensor:
    """(m, n) averaging matrix whose rows are contiguous blocks tiling range(n)."""
    edges = [(i * n) // m for i in range(m + 1)]
    mat = torch.zeros(m, n, dtype=dtype, device=device)
    for i in range(m):
        lo, hi = edges[i], edges[i + 1]
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def pool_to_common_grid(f: torch.Tensor, grid) -> torch.Tensor:
    """Adaptive average pooling of a (B, C, H, W, D) map with non-overlapping blocks."""
    grid = tuple(int(g) for g in grid)
    src = tuple(f.shape[2:])
    if len(grid) != 3 or any(g < 1 for g in grid):
        raise ValueError(f"invalid grid {grid}")
    if any(g > s for g, s in zip(grid, src)):
        raise ValueError(f"grid {grid} larger than source dims {src}")
    if grid == src:
        return f
    ph, pw, pd = (_block_matrix(s, g, f.dtype, f.device) for s, g in zip(src, grid))
    return torch.einsum("bchwd,ih,jw,kd->bcijk", f, ph, pw, pd)


def common_grid(target, *dims):
    return tuple(min(t, *(d[a] for d in dims)) for a, t in enumerate(target))


class OrganInteraction(nn.Module):
    """Attention-based exchange between the esophagus map and one other organ's map."""

    def __init__(self, channels: int, heads: int = 4, grid=(4, 4, 4)):
        super().__init__()
        dim = 2 * channels
        if dim % heads:
            heads = 1
        self.channels = channels
        self.grid = tuple(grid)
        self.attn = MultiHeadAttention(dim, heads, out_proj=False)
        self.proj = nn.Linear(dim, dim, bias=False)  # mixing projection, no bias
        nn.init.normal_(self.proj.weight, std=dim ** -0.5)
        self.refine_e = nn.Conv3d(channels, channels, 1)
        self.refine_x = nn.Conv3d(channels, channels, 1)
        # zero-initialised refinement: the module starts as an exact identity
        for conv in (self.refine_e, self.refine_x):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, fe: torch.Tensor, fx: torch.Tensor):
        if fe.shape[1] != self.channels or fx.shape[1] != self.channels:
            raise ValueError(
                f"channel mismatch: expected {self.channels}, got {fe.shape[1]} and {fx.shape[1]}"
            )
        if fe.shape[0] != fx.shape[0]:
            raise ValueError("batch size mismatch between organ maps")
        grid = common_grid(self.grid, fe.shape[2:], fx.shape[2:])
        pe = pool_to_common_grid(fe, grid)
        px = pool_to_common_grid(fx, grid)
        b = fe.shape[0]
        tokens = torch.cat([pe, px], dim=1).flatten(2).transpose(1, 2)  # (B, N, 2C)
        mixed = self.proj(self.attn(tokens))
        halves = mixed.transpose(1, 2).reshape(b, 2 * self.channels, *grid)
        de = self.refine_e(halves[:, : self.channels])
        dx = self.refine_x(halves[:, self.channels:])
        de = _resize(de, fe.shape[2:])
        dx = _resize(dx, fx.shape[2:])
        return de, dx


def _resize(x, dims):
    if tuple(x.shape[2:]) == tuple(dims):
        return x
    return F.interpolate(x, size=tuple(dims), mode="trilinear", align_corners=False)


def ori_interact(fe, fx, module: OrganInteraction):
    return module(fe, fx)


class OriStage(nn.Module):
    """Esophagus-liver and esophagus-spleen interactions at one encoder stage."""

    def __init__(self, channels: int, heads: int = 4, grid=(4, 4, 4), partners=("liver", "spleen")):
        super().__init__()
        self.pairs = nn.ModuleDict({p: OrganInteraction(channels, heads, grid) for p in partners})

    def forward(self, feats: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        fe = feats["esophagus"]
        out = dict(feats)
        deltas = []
        for organ, pair in self.pairs.items():
            de, dx = pair(fe, feats[organ])
            deltas.append(de)
            out[organ] = feats[organ] + dx
        if deltas:
            out["esophagus"] = fe + sum(deltas) / len(deltas)
        return out


def apply_ori_stage(fe, fl, fs, stage: OriStage):
    out = stage({"esophagus": fe, "liver": fl, "spleen": fs})
    return out["esophagus"], out["liver"], out["spleen"]
