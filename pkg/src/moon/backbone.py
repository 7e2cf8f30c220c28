"""Staged 3D encoder: convolutional (local) stages followed by self-attention (global) stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import RoiVolume


class InputTooSmallError(ValueError):
    pass


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
    """Scaled dot-product attention, softmax(q k^T / sqrt(d_k)) v.

    Leading dimensions are treated as batch dims. ``q`` is (..., N, d),
    ``k`` is (..., M, d), ``v`` is (..., M, d_v).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key dim mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value length mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ValueError("batch dims of q, k, v differ")
    d_k = q.shape[-1]
    if d_k == 0:
        raise ValueError("key dim must be positive")
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    """Multi-head attention over token sequences (B, N, dim).

    With ``out_proj=False`` the concatenated head outputs are returned as is,
    for callers that apply their own projection.
    """

    def __init__(self, dim: int, heads: int = 1, out_proj: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim) if out_proj else None
        for lin in (self.q, self.k, self.v):
            nn.init.normal_(lin.weight, std=dim ** -0.5)
            nn.init.zeros_(lin.bias)
        if self.proj is not None:
            nn.init.normal_(self.proj.weight, std=dim ** -0.5)
            nn.init.zeros_(self.proj.bias)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, x_q, x_k=None, x_v=None):
        x_k = x_q if x_k is None else x_k
        x_v = x_k if x_v is None else x_v
        out = attention(self._split(self.q(x_q)), self._split(self.k(x_k)), self._split(self.v(x_v)))
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.dim)
        return self.proj(out) if self.proj is not None else out


class ChannelNorm(nn.Module):
    """Layer norm across channels at every voxel of a (B, C, H, W, D) map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=1, keepdim=True)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return (x - mean) * torch.rsqrt(var + self.eps) * self.weight.view(shape) + self.bias.view(shape)


def _pointwise(c_in, c_out):
    return nn.Conv3d(c_in, c_out, kernel_size=1)


class LocalBlock(nn.Module):
    """3x3x3 convolutional token mixer plus pointwise MLP, both residual."""

    def __init__(self, channels: int, mlp_ratio: float = 2.0):
        super().__init__()
        hidden = int(channels * mlp_ratio)
        self.norm1 = ChannelNorm(channels)
        # dense rather than depthwise: depthwise 3D conv backward is slower on CPU at these widths
        self.mix = nn.Sequential(
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.GELU(),
            _pointwise(channels, channels),
        )
        self.norm2 = ChannelNorm(channels)
        self.mlp = nn.Sequential(_pointwise(channels, hidden), nn.GELU(), _pointwise(hidden, channels))

    def forward(self, x):
        x = x + self.mix(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class GlobalBlock(nn.Module):
    """Pre-norm transformer block over all voxels of the stage, with a learned position embedding."""

    def __init__(self, channels: int, grid: tuple[int, int, int], heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        hidden = int(channels * mlp_ratio)
        self.grid = tuple(grid)
        self.pos = nn.Parameter(torch.zeros(1, math.prod(grid), channels))
        self.norm1 = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.GELU(), nn.Linear(hidden, channels))

    def forward(self, x):
        b, c, *grid = x.shape
        if tuple(grid) != self.grid:
            raise ValueError(f"global block built for grid {self.grid}, got {tuple(grid)}")
        t = x.flatten(2).transpose(1, 2) + self.pos
        t = t + self.attn(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).reshape(b, c, *grid)


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 64)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    strides: tuple[tuple[int, int, int], ...] = ((2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 1, 1))
    heads: int = 4
    block_types: tuple[str, ...] = ("local", "local", "global", "global")
    mlp_ratio: float = 2.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.depths = tuple(int(d) for d in self.depths)
        self.strides = tuple(
            (int(s),) * 3 if isinstance(s, int) else tuple(int(v) for v in s) for s in self.strides
        )
        self.block_types = tuple(self.block_types)
        n = len(self.channels)
        if not (len(self.depths) == len(self.strides) == len(self.block_types) == n):
            raise ValueError("channels, depths, strides and block_types must have equal length")
        if n < 3:
            raise ValueError("encoder needs at least three stages")
        for c, kind in zip(self.channels, self.block_types):
            if kind not in ("local", "global"):
                raise ValueError(f"unknown block type {kind!r}")
            if kind == "global" and c % self.heads:
                raise ValueError(f"{c} channels not divisible by {self.heads} heads")
        if any(s < 1 for st in self.strides for s in st):
            raise ValueError("strides must be >= 1")

    def total_stride(self) -> tuple[int, int, int]:
        return tuple(math.prod(st[a] for st in self.strides) for a in range(3))


@dataclass
class StagePyramid:
    """Last three stage outputs (channels-first) and the pooled embedding of the deepest."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    pooled: torch.Tensor
    padding: tuple[tuple[int, int], ...] = ()
    input_dims: tuple[int, int, int] = ()
    stages: list = field(default_factory=list)


def padding_for(dims, total_stride) -> tuple[tuple[int, int], ...]:
    pads = []
    for n, s in zip(dims, total_stride):
        if n < s:
            raise InputTooSmallError(f"input dims {tuple(dims)} smaller than total stride {tuple(total_stride)}")
        extra = -n % s
        pads.append((extra // 2, extra - extra // 2))
    return tuple(pads)


def pad_volume(x: torch.Tensor, pads) -> torch.Tensor:
    # F.pad lists the last axis first
    flat = [p for pair in reversed(pads) for p in pair]
    return F.pad(x, flat) if any(flat) else x


class Stage(nn.Module):
    def __init__(self, c_in, c_out, stride, depth, kind, grid, heads, mlp_ratio, stem=False):
        super().__init__()
        # non-overlapping patch merging: output cell i covers input block [i*s, (i+1)*s),
        # which is the cell-centre convention trilinear upsampling assumes
        kernel = tuple(stride)
        # normalize before downsampling; the stem sees raw intensities, and a
        # channel norm there would divide out the local intensity level
        self.norm = nn.Identity() if stem else ChannelNorm(c_in)
        self.down = nn.Conv3d(c_in, c_out, kernel, stride=stride)
        if kind == "local":
            blocks = [LocalBlock(c_out, mlp_ratio) for _ in range(depth)]
        else:
            blocks = [GlobalBlock(c_out, grid, heads, mlp_ratio) for _ in range(depth)]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(self.down(self.norm(x)))


class Encoder(nn.Module):
    """One organ branch. Built for a fixed input size so global stages know their token grid."""

    def __init__(self, cfg: EncoderConfig, input_dims: tuple[int, int, int], in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        self.input_dims = tuple(int(n) for n in input_dims)
        self.padding = padding_for(self.input_dims, cfg.total_stride())
        grid = [n + sum(p) for n, p in zip(self.input_dims, self.padding)]
        stages = []
        c_prev = in_channels
        for i, (c, stride, depth, kind) in enumerate(zip(cfg.channels, cfg.strides, cfg.depths, cfg.block_types)):
            grid = [g // s for g, s in zip(grid, stride)]
            stages.append(Stage(c_prev, c, stride, depth, kind, tuple(grid), cfg.heads, cfg.mlp_ratio, stem=i == 0))
            c_prev = c
        self.stages = nn.ModuleList(stages)
        self.reset_parameters()

    def reset_parameters(self):
        # attention projections keep their scaled-normal init
        skip = {
            id(lin)
            for m in self.modules() if isinstance(m, MultiHeadAttention)
            for lin in (m.q, m.k, m.v, m.proj)
        }
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear) and id(m) not in skip:
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def stage_dims(self) -> list[tuple[int, int, int]]:
        grid = [n + sum(p) for n, p in zip(self.input_dims, self.padding)]
        out = []
        for stride in self.cfg.strides:
            grid = [g // s for g, s in zip(grid, stride)]
            out.append(tuple(grid))
        return out

    def prepare(self, x: torch.Tensor) -> torch.Tensor:
        """Validate a (B, C, H, W, D) batch and zero-pad it to the stride grid."""
        if tuple(x.shape[2:]) != self.input_dims:
            if any(n < s for n, s in zip(x.shape[2:], self.cfg.total_stride())):
                raise InputTooSmallError(
                    f"input dims {tuple(x.shape[2:])} smaller than total stride {self.cfg.total_stride()}"
                )
            raise ValueError(f"encoder built for dims {self.input_dims}, got {tuple(x.shape[2:])}")
        return pad_volume(x, self.padding)

    def forward(self, x: torch.Tensor) -> StagePyramid:
        x = self.prepare(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return StagePyramid(
            f1=outs[-3], f2=outs[-2], f3=outs[-1],
            pooled=outs[-1].mean(dim=(2, 3, 4)),
            padding=self.padding, input_dims=self.input_dims, stages=outs,
        )


def encode(encoder: Encoder, vol) -> StagePyramid:
    """Run one branch on a single volume (``RoiVolume`` or array) in eval mode."""
    data = torch.as_tensor(np.asarray(vol.data if isinstance(vol, RoiVolume) else vol))
    param = next(encoder.parameters())
    x = data.to(param.dtype)[None, None]
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            return encoder(x)
    finally:
        encoder.train(was_training)
