"""Grad-CAM heat volumes over a branch's final (pre-pooling) feature map."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import RoiVolume, write_volume

TASK_INDEX = {"geG2": 0, "G3": 1}


@dataclass
class HeatVolume:
    data: np.ndarray            # (H, W, D), >= 0, aligned to the input ROI
    organ: str
    target: int                 # logit index of the fused output
    layer: str

    def to_volume(self, spacing=(1.0, 1.0, 1.0)) -> RoiVolume:
        return RoiVolume(self.data.astype(np.float32), spacing)


def cam_from_activations(acts: torch.Tensor, grads: torch.Tensor) -> torch.Tensor:
    """ReLU of the channel-weighted activation sum; weights are spatially averaged gradients.

    ``acts`` and ``grads`` are (C, h, w, d).
    """
    weights = grads.mean(dim=(1, 2, 3))
    return torch.relu(torch.einsum("c,chwd->hwd", weights, acts))


def upsample_to_roi(cam: torch.Tensor, padded_dims, padding) -> torch.Tensor:
    """Trilinear upsample from feature grid to the padded input grid, then drop the padding."""
    up = F.interpolate(cam[None, None], size=tuple(padded_dims), mode="trilinear", align_corners=False)[0, 0]
    sl = tuple(slice(lo, n - hi) for (lo, hi), n in zip(padding, padded_dims))
    return up[sl]


def normalize_heat(heat: torch.Tensor) -> torch.Tensor:
    peak = heat.max()
    return heat / peak if peak > 0 else heat


def gradcam_map(model, volumes: dict, organ: str = "esophagus", target="G3") -> HeatVolume:
    """Heat volume for one case. ``volumes`` maps organ -> RoiVolume or (H, W, D) array;
    ``target`` is a task name or a fused-logit index."""
    idx = TASK_INDEX[target] if isinstance(target, str) else int(target)
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"parameter {name} is not finite")
    param = next(model.parameters())
    x = {
        o: torch.as_tensor(np.asarray(v.data if isinstance(v, RoiVolume) else v), dtype=param.dtype)[None, None]
        for o, v in volumes.items() if o in model.cfg.organs
    }
    was_training = model.training
    model.eval()
    try:
        out = model(x, keep_features=True)
        feat = out["features"][organ]
        score = out["fused"][0, idx]
        (grad,) = torch.autograd.grad(score, feat)
    finally:
        model.train(was_training)
    cam = cam_from_activations(feat[0].detach(), grad[0])
    enc = model.encoders[organ]
    padded = [n + sum(p) for n, p in zip(enc.input_dims, enc.padding)]
    heat = normalize_heat(upsample_to_roi(cam, padded, enc.padding))
    return HeatVolume(heat.detach().cpu().numpy().astype(np.float32), organ, idx, f"{organ}.final")


def localization_score(heat: np.ndarray, mask: np.ndarray, top_frac: float = 0.05) -> float:
    """Share of the heat mass of the top ``top_frac`` voxels that falls inside ``mask``."""
    flat = np.asarray(heat, dtype=float).ravel()
    m = np.asarray(mask, dtype=bool).ravel()
    if flat.shape != m.shape:
        raise ValueError("heat and mask shapes differ")
    k = max(1, math.ceil(top_frac * flat.size))
    # stable sort so ties resolve by voxel order
    top = np.argsort(-flat, kind="stable")[:k]
    mass = flat[top].sum()
    if mass <= 0:
        return 0.0
    return float(flat[top][m[top]].sum() / mass)


def write_pgm_slices(heat: np.ndarray, out_dir, prefix: str = "heat") -> list[Path]:
    """One binary PGM (P5) image per slice along the last axis, scaled to 0..255."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(heat, dtype=float), 0.0, None)
    peak = arr.max()
    img = (arr / peak * 255.0).round().astype(np.uint8) if peak > 0 else arr.astype(np.uint8)
    paths = []
    h, w, d = img.shape
    for z in range(d):
        p = out_dir / f"{prefix}_z{z:03d}.pgm"
        p.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img[:, :, z].tobytes())
        paths.append(p)
    return paths


def save_heat(heat: HeatVolume, path, spacing=(1.0, 1.0, 1.0)) -> None:
    write_volume(heat.to_volume(spacing), path)
