"""Ordinal branch heads, fusion strategies and ordinal decoding."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .datamodel import Grade

N_THRESHOLDS = 2
STRATEGIES = ("Concat", "PredSum", "LowRank", "FiLM")


def branch_head(embedding: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine map of a C-dim embedding to threshold logits."""
    return embedding @ weight.T + bias


class BranchHead(nn.Linear):
    def __init__(self, channels: int, n_out: int = N_THRESHOLDS):
        super().__init__(channels, n_out)
        nn.init.normal_(self.weight, std=channels ** -0.5)
        nn.init.zeros_(self.bias)


class ConcatFusion(nn.Module):
    def __init__(self, channels: int, organs, n_out: int = N_THRESHOLDS):
        super().__init__()
        self.organs = tuple(organs)
        self.head = nn.Linear(channels * len(self.organs), n_out)
        nn.init.normal_(self.head.weight, std=(channels * len(self.organs)) ** -0.5)
        nn.init.zeros_(self.head.bias)

    def forward(self, emb, logits, heads):
        return self.head(torch.cat([emb[o] for o in self.organs], dim=-1))


class PredSumFusion(nn.Module):
    def __init__(self, organs):
        super().__init__()
        self.organs = tuple(organs)

    def forward(self, emb, logits, heads):
        return sum(logits[o] for o in self.organs)


class LowRankFusion(nn.Module):
    """Low-rank multimodal fusion: sum over r of the elementwise product of per-organ factors.

    Each organ embedding is augmented with a constant 1 before its factor
    projection, so lower-order (unimodal and bimodal) terms are kept.
    """

    def __init__(self, channels: int, organs, rank: int = 4, n_out: int = N_THRESHOLDS):
        super().__init__()
        self.organs = tuple(organs)
        self.rank = rank
        self.factors = nn.ParameterDict({
            o: nn.Parameter(torch.empty(rank, channels + 1, n_out)) for o in self.organs
        })
        self.rank_weights = nn.Parameter(torch.empty(rank))
        self.bias = nn.Parameter(torch.zeros(n_out))
        for f in self.factors.values():
            nn.init.normal_(f, std=(channels + 1) ** -0.5)
            # constant row at 1 so the product starts close to a sum of unimodal terms
            with torch.no_grad():
                f[:, -1, :] = 1.0
        nn.init.constant_(self.rank_weights, 1.0 / rank)

    def forward(self, emb, logits, heads):
        prod = None
        for o in self.organs:
            e = emb[o]
            aug = torch.cat([e, torch.ones_like(e[..., :1])], dim=-1)
            z = torch.einsum("bc,rco->bro", aug, self.factors[o])
            prod = z if prod is None else prod * z
        return torch.einsum("r,bro->bo", self.rank_weights, prod) + self.bias


class FiLMFusion(nn.Module):
    """Esophagus embedding modulated by gamma/beta generated from liver and spleen.

    The modulated embedding is decoded by the esophagus branch head itself,
    so identity modulation reproduces the esophagus-only logits exactly.
    """

    def __init__(self, channels: int, conditioners=("liver", "spleen")):
        super().__init__()
        self.conditioners = tuple(conditioners)
        n_in = channels * len(self.conditioners)
        self.gamma = nn.Linear(n_in, channels)
        self.beta = nn.Linear(n_in, channels)
        for lin, b in ((self.gamma, 1.0), (self.beta, 0.0)):
            nn.init.zeros_(lin.weight)
            nn.init.constant_(lin.bias, b)

    def modulate(self, emb):
        cond = torch.cat([emb[o] for o in self.conditioners], dim=-1)
        return self.gamma(cond) * emb["esophagus"] + self.beta(cond)

    def forward(self, emb, logits, heads):
        return heads["esophagus"](self.modulate(emb))


class SingleBranch(nn.Module):
    """Single-organ baseline: the branch head's logits are the final logits."""

    def __init__(self, organ: str = "esophagus"):
        super().__init__()
        self.organ = organ

    def forward(self, emb, logits, heads):
        return logits[self.organ]


def make_fusion(strategy: str, channels: int, organs, rank: int = 4) -> nn.Module:
    organs = tuple(organs)
    if len(organs) == 1:
        return SingleBranch(organs[0])
    if strategy == "Concat":
        return ConcatFusion(channels, organs)
    if strategy == "PredSum":
        return PredSumFusion(organs)
    if strategy == "LowRank":
        return LowRankFusion(channels, organs, rank)
    if strategy == "FiLM":
        if "esophagus" not in organs:
            raise ValueError("FiLM fusion needs the esophagus branch")
        return FiLMFusion(channels, [o for o in organs if o != "esophagus"])
    raise ValueError(f"unknown fusion strategy {strategy!r}; expected one of {STRATEGIES}")


def fuse(fusion: nn.Module, embeddings: dict, logits: dict, heads=None) -> torch.Tensor:
    dims = {tuple(e.shape) for e in embeddings.values()}
    if len(dims) > 1:
        raise ValueError(f"inconsistent embedding shapes {dims}")
    return fusion(embeddings, logits, heads or {})


def ordinal_decode(h) -> np.ndarray | Grade:
    """Grade from threshold logits: G1 plus the length of the leading run of logits > 0.

    sigmoid(h) > 0.5 is evaluated as h > 0. Accepts one 2-vector (returns a
    ``Grade``) or an (n, 2) batch (returns an int array of grade values).
    """
    arr = np.asarray(h.detach().cpu() if isinstance(h, torch.Tensor) else h, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite logits")
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    above = arr > 0
    prefix = np.cumprod(above, axis=1).sum(axis=1)
    grades = 1 + prefix
    return Grade(int(grades[0])) if single else grades.astype(int)


def task_score(h, task: str):
    """Probability for task ``"geG2"`` (first threshold) or ``"G3"`` (second)."""
    idx = {"geG2": 0, ">=G2": 0, "G3": 1}.get(task)
    if idx is None:
        raise ValueError(f"unknown task {task!r}")
    t = torch.as_tensor(h, dtype=torch.float64) if not isinstance(h, torch.Tensor) else h
    return torch.sigmoid(t[..., idx])
