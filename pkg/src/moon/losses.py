"""Ordinal regression loss, CCA loss between branch logits, and the composite objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    ordinal_weight: float = 0.8
    eps: float = 1e-12
    cca_min_batch: int = 4
    # added to both covariance matrices before eigendecomposition during training
    eig_jitter: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.ordinal_weight <= 1.0:
            raise ValueError(f"ordinal_weight must lie in [0, 1], got {self.ordinal_weight}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def ordinal_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over the batch and the cumulative thresholds."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError(f"expected (n, h) logits with n >= 1, got {tuple(logits.shape)}")
    if logits.shape != targets.shape:
        raise ValueError(f"logit/target shape mismatch {tuple(logits.shape)} vs {tuple(targets.shape)}")
    _check_finite("logits", logits)
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def _standardize(h, eps):
    return (h - h.mean(dim=0)) / (h.std(dim=0, unbiased=True) + eps)


def _canonical_sign(vecs, rel_tol: float = 1e-6):
    # eigenvector signs are arbitrary; make the first non-negligible entry of each
    # column positive. (Largest-magnitude would be ambiguous for h=2, where the
    # eigenvectors of [[1, r], [r, 1]] have entries of equal magnitude.)
    mag = vecs.abs()
    significant = mag > rel_tol * mag.max(dim=0, keepdim=True).values
    idx = significant.to(torch.int8).argmax(dim=0)
    signs = torch.sign(vecs.gather(0, idx[None]).squeeze(0))
    signs = torch.where(signs == 0, torch.ones_like(signs), signs)
    return vecs * signs.detach()


def _top_eigvecs(cov, k, jitter):
    if jitter:
        cov = cov + jitter * torch.eye(cov.shape[0], dtype=cov.dtype, device=cov.device)
    vals, vecs = torch.linalg.eigh(cov)
    order = torch.argsort(vals, descending=True)[:k]
    return _canonical_sign(vecs[:, order])


def cca_loss(h1: torch.Tensor, h2: torch.Tensor, eps: float = 1e-12, jitter: float = 0.0) -> torch.Tensor:
    """Negative normalised cross-covariance trace between two (n, h) logit matrices.

    Both inputs are standardised per column, rotated onto the eigenvectors of
    their own covariance (sorted by decreasing eigenvalue) and compared via
    -Tr(A^T B / (n-1)) / (|A|_F |B|_F + eps) for the rotated matrices A, B. The value lies in
    [-1/(n-1), 1/(n-1)].
    """
    if h1.ndim != 2 or h1.shape != h2.shape:
        raise ValueError(f"expected two (n, h) matrices of equal shape, got {tuple(h1.shape)}, {tuple(h2.shape)}")
    n, h = h1.shape
    if n < 2:
        raise ValueError(f"cca_loss needs n >= 2 samples, got {n}")
    _check_finite("first input", h1)
    _check_finite("second input", h2)
    h1 = _standardize(h1, eps)
    h2 = _standardize(h2, eps)
    c1 = h1.T @ h1 / (n - 1)
    c2 = h2.T @ h2 / (n - 1)
    h1 = h1 @ _top_eigvecs(c1, h, jitter)
    h2 = h2 @ _top_eigvecs(c2, h, jitter)
    cross = h1.T @ h2 / (n - 1)
    return -torch.trace(cross) / (torch.linalg.norm(h1) * torch.linalg.norm(h2) + eps)


def combine(ordinal: torch.Tensor, cca_el, cca_es, ordinal_weight: float):
    return ordinal_weight * ordinal + (1.0 - ordinal_weight) * (cca_el + cca_es)


def overall_loss(hf, he, hl, hs, targets, cfg: LossConfig | None = None, use_cca: bool = True,
                 training: bool = False) -> dict[str, torch.Tensor]:
    """Composite objective; returns a dict with ``total`` and its parts.

    With ``use_cca`` off (or without all three branch logits) the total is the
    ordinal loss alone. Batches below ``cfg.cca_min_batch`` keep the weighting
    but zero the CCA terms.
    """
    cfg = cfg or LossConfig()
    n = hf.shape[0]
    for name, t in (("esophagus logits", he), ("liver logits", hl), ("spleen logits", hs), ("targets", targets)):
        if t is not None and t.shape[0] != n:
            raise ValueError(f"batch size mismatch: fused logits have {n} rows, {name} has {t.shape[0]}")
    ordl = ordinal_loss(hf, targets)
    zero = torch.zeros((), dtype=hf.dtype, device=hf.device)
    cca_el = cca_es = zero
    active = use_cca and he is not None and hl is not None and hs is not None
    # at ordinal_weight == 1 the CCA terms carry zero weight; skipping them keeps gradients identical
    if active and cfg.ordinal_weight < 1.0:
        if n >= max(cfg.cca_min_batch, 2):
            jitter = cfg.eig_jitter if training else 0.0
            cca_el = cca_loss(he, hl, cfg.eps, jitter)
            cca_es = cca_loss(he, hs, cfg.eps, jitter)
        else:
            log.debug("batch of %d below cca_min_batch=%d; CCA terms zeroed", n, cfg.cca_min_batch)
    return {
        "total": combine(ordl, cca_el, cca_es, cfg.ordinal_weight) if active else ordl,
        "ordinal": ordl,
        "cca_el": cca_el,
        "cca_es": cca_es,
    }
