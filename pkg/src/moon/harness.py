"""Augmentation, training loop, checkpoints and the cross-validation / holdout drivers."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import zoom

from .config import AugmentConfig, RunConfig, from_dict
from .datamodel import ORGANS, DatasetManifest, RoiVolume, ordinal_encode, stratified_kfold
from .heads import ordinal_decode
from .losses import overall_loss
from .metrics import MetricsReport, aggregate_cv, task_metrics
from .model import MoonModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "moon-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- augmentation

def _rng(seed) -> np.random.Generator:
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _fit_to(arr: np.ndarray, dims) -> np.ndarray:
    """Center-crop or zero-pad ``arr`` to ``dims``."""
    out = np.zeros(dims, dtype=arr.dtype)
    src, dst = [], []
    for n_in, n_out in zip(arr.shape, dims):
        if n_in >= n_out:
            lo = (n_in - n_out) // 2
            src.append(slice(lo, lo + n_out))
            dst.append(slice(0, n_out))
        else:
            lo = (n_out - n_in) // 2
            src.append(slice(0, n_in))
            dst.append(slice(lo, lo + n_in))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def augment_array(data: np.ndarray, seed, cfg: AugmentConfig) -> np.ndarray:
    """Random rescale, flips and cutout; deterministic in ``seed`` (int or int tuple)."""
    if not cfg.enabled:
        return data
    rng = _rng(seed)
    out = np.asarray(data, dtype=np.float32)
    dims = out.shape
    if cfg.spatial_scale > 0:
        factor = rng.uniform(1 - cfg.spatial_scale, 1 + cfg.spatial_scale)
        zoomed = zoom(out, factor, order=1, mode="nearest", grid_mode=False)
        out = _fit_to(zoomed.astype(np.float32), dims)
    if cfg.intensity_scale > 0:
        out = out * np.float32(rng.uniform(1 - cfg.intensity_scale, 1 + cfg.intensity_scale))
    for axis in cfg.flip_axes:
        if rng.random() < cfg.flip_p:
            out = np.flip(out, axis=axis)
    if cfg.cutout_count > 0:
        if cfg.cutout_size is not None:
            size = [int(s) for s in cfg.cutout_size]
        else:
            size = [max(1, round(cfg.cutout_frac * n)) for n in dims]
        if any(s > n for s, n in zip(size, dims)):
            log.info("cutout %s larger than volume %s; clamped", size, dims)
            size = [min(s, n) for s, n in zip(size, dims)]
        out = np.array(out, copy=True)
        for _ in range(cfg.cutout_count):
            lo = [int(rng.integers(0, n - s + 1)) for s, n in zip(size, dims)]
            out[tuple(slice(a, a + s) for a, s in zip(lo, size))] = 0.0
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(vol: RoiVolume, seed, cfg: AugmentConfig) -> RoiVolume:
    return RoiVolume(augment_array(vol.data, seed, cfg), vol.spacing)


# ---------------------------------------------------------------- data

@dataclass
class CaseArrays:
    """All volumes of a case list, stacked per organ as (N, H, W, D) float32."""

    ids: list[str]
    volumes: dict[str, np.ndarray]
    grades: np.ndarray
    masks: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    @property
    def targets(self) -> np.ndarray:
        return np.array([ordinal_encode(int(g)).as_tuple() for g in self.grades], dtype=np.float32)

    def dims(self) -> dict[str, tuple[int, int, int]]:
        return {o: tuple(v.shape[1:]) for o, v in self.volumes.items()}

    def take(self, idx) -> "CaseArrays":
        idx = np.asarray(idx)
        return CaseArrays(
            [self.ids[i] for i in idx],
            {o: v[idx] for o, v in self.volumes.items()},
            self.grades[idx],
            None if self.masks is None else self.masks[idx],
        )

    def select(self, ids) -> "CaseArrays":
        pos = {cid: i for i, cid in enumerate(self.ids)}
        return self.take([pos[c] for c in ids])


def load_arrays(manifest: DatasetManifest, ids=None) -> CaseArrays:
    cases = manifest.cases if ids is None else [manifest.by_id()[i] for i in ids]
    vols = {o: [] for o in ORGANS}
    masks, grades = [], []
    for case in cases:
        v, mask = manifest.load_case(case)
        for o in ORGANS:
            vols[o].append(v[o].data)
        masks.append(mask)
        grades.append(int(case.grade))
    stacked = {}
    for o in ORGANS:
        shapes = {a.shape for a in vols[o]}
        if len(shapes) > 1:
            raise ValueError(f"{o} volumes have differing dims {sorted(shapes)}")
        stacked[o] = np.stack(vols[o]) if vols[o] else np.zeros((0, 1, 1, 1), np.float32)
    mask_arr = np.stack(masks) if masks and all(m is not None for m in masks) else None
    return CaseArrays([c.id for c in cases], stacked, np.array(grades, dtype=int), mask_arr)


def _batch_tensors(arrays: CaseArrays, idx, organs, aug: AugmentConfig | None, seed, epoch):
    out = {}
    for o in organs:
        vols = arrays.volumes[o][idx]
        if aug is not None and aug.enabled:
            organ_id = ORGANS.index(o)
            vols = np.stack([
                augment_array(v, (seed, epoch, int(i), organ_id), aug) for v, i in zip(vols, idx)
            ])
        out[o] = torch.from_numpy(np.ascontiguousarray(vols))[:, None]
    return out


# ---------------------------------------------------------------- model / checkpoints

def build_model(cfg: RunConfig, dims: dict | None = None) -> MoonModel:
    if dims is not None:
        mc = cfg.model
        mismatch = {o: d for o, d in dims.items() if o in mc.organs and tuple(mc.input_dims.get(o, ())) != d}
        if mismatch:
            raise ValueError(f"model.input_dims {mc.input_dims} do not match data dims {dims}")
    torch.manual_seed(cfg.train.seed)
    return MoonModel(cfg.model)


def with_data_dims(cfg: RunConfig, arrays: CaseArrays) -> RunConfig:
    """Echo the dataset's ROI dims into the model config."""
    dims = {o: list(d) for o, d in arrays.dims().items()}
    current = {o: list(d) for o, d in cfg.model.input_dims.items()}
    if dims == current:
        return cfg
    return cfg.replace({"model.input_dims": dims})


def save_checkpoint(path, model: MoonModel, cfg: RunConfig, epoch: int, extra=None) -> None:
    state = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_json(),
        "epoch": epoch,
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "rng_state": torch.get_rng_state(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[MoonModel, RunConfig, dict]:
    state = torch.load(Path(path), map_location="cpu", weights_only=False)
    if state.get("format") != CHECKPOINT_FORMAT or state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} MOON checkpoint")
    cfg = from_dict(state["config"])
    model = MoonModel(cfg.model)
    model.load_state_dict(state["params"])
    model.eval()
    return model, cfg, state


# ---------------------------------------------------------------- evaluation

@torch.no_grad()
def predict(model: MoonModel, arrays: CaseArrays, batch_size: int = 16) -> dict[str, np.ndarray]:
    was_training = model.training
    model.eval()
    hf, branch = [], {o: [] for o in model.cfg.organs}
    try:
        for start in range(0, len(arrays), batch_size):
            idx = np.arange(start, min(start + batch_size, len(arrays)))
            out = model(_batch_tensors(arrays, idx, model.cfg.organs, None, 0, 0))
            hf.append(out["fused"].double().numpy())
            for o in branch:
                branch[o].append(out["branch"][o].double().numpy())
    finally:
        model.train(was_training)
    return {"fused": np.concatenate(hf), **{o: np.concatenate(v) for o, v in branch.items()}}


def evaluate(model: MoonModel, arrays: CaseArrays) -> dict[str, float]:
    logits = predict(model, arrays)["fused"]
    probs = 1.0 / (1.0 + np.exp(-logits))
    grades = ordinal_decode(logits)
    return task_metrics(grades, arrays.grades, probs[:, 0], probs[:, 1])


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: MoonModel
    config: RunConfig
    history: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int | None = None


def train(cfg: RunConfig, train_arrays: CaseArrays, val_arrays: CaseArrays | None = None,
          out_dir=None, log_name: str = "train_log.jsonl") -> TrainResult:
    """Train one model. Writes ``train_log.jsonl`` and final/best checkpoints when ``out_dir`` is set."""
    if len(train_arrays) == 0:
        raise TrainingError("empty training set")
    cfg = with_data_dims(cfg, train_arrays)
    tc = cfg.train
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    targets = torch.from_numpy(train_arrays.targets)
    organs = cfg.model.organs
    multi = len(organs) == 3
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / log_name, "w")
    result = TrainResult(model, cfg)
    best_score = -math.inf
    try:
        for epoch in range(1, tc.epochs + 1):
            lr = tc.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            order = _rng((tc.seed, epoch)).permutation(len(train_arrays))
            total, count = 0.0, 0
            for b, start in enumerate(range(0, len(order), tc.batch_size)):
                idx = order[start:start + tc.batch_size]
                x = _batch_tensors(train_arrays, idx, organs, tc.augment, tc.seed, epoch)
                out = model(x)
                h = out["branch"]
                where = f"epoch {epoch}, batch {b}; case ids {[train_arrays.ids[i] for i in idx]}"
                try:
                    parts = overall_loss(
                        out["fused"], h.get("esophagus"), h.get("liver"), h.get("spleen"), targets[idx],
                        cfg.loss, use_cca=tc.use_cca and multi, training=True,
                    )
                except ValueError as exc:
                    raise TrainingError(f"{exc} at {where}") from exc
                loss = parts["total"]
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at {where}; parts { {k: float(v) for k, v in parts.items()} }"
                    )
                opt.zero_grad()
                loss.backward()
                if tc.grad_clip > 0:
                    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
                    if norm > tc.grad_clip:
                        log.debug("epoch %d batch %d: gradient norm %.3g clipped to %g", epoch, b, norm, tc.grad_clip)
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            record = {"epoch": epoch, "lr": lr, "train_loss": total / count}
            last = epoch == tc.epochs
            if val_arrays is not None and len(val_arrays) and (epoch % tc.eval_every == 0 or last):
                m = evaluate(model, val_arrays)
                record.update({
                    "val_acc_geG2": m["acc_geG2"], "val_auc_geG2": m["auc_geG2"],
                    "val_acc_G3": m["acc_G3"], "val_auc_G3": m["auc_G3"],
                })
                score = 0.5 * (m["auc_geG2"] + m["auc_G3"])
                if not math.isnan(score) and score > best_score:
                    best_score = score
                    result.best_epoch = epoch
                    result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                    if out_dir is not None:
                        save_checkpoint(out_dir / "best.pt", model, cfg, epoch, {"val_score": score})
            result.history.append(record)
            log.info(json.dumps(record))
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final.pt", model, cfg, tc.epochs)
    model.eval()
    return result


# ---------------------------------------------------------------- drivers

def flags_of(cfg: RunConfig) -> dict:
    return {
        "organs": list(cfg.model.organs),
        "use_ori": cfg.model.ori_active,
        "use_hfe": cfg.model.use_hfe,
        "use_cca": cfg.train.use_cca and len(cfg.model.organs) == 3,
    }


def run_crossval(cfg: RunConfig, manifest: DatasetManifest, k: int | None = None, out_dir=None,
                 label: str = "", arrays: CaseArrays | None = None) -> MetricsReport:
    """Train ``k`` models on stratified folds and aggregate held-out metrics."""
    k = k or cfg.data.k
    split = stratified_kfold(manifest, k, cfg.data.split_seed)
    arrays = arrays if arrays is not None else load_arrays(manifest)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "folds.json").write_text(json.dumps(split.to_json()))
    fold_metrics = []
    for i, held in enumerate(split.folds):
        fold_dir = out_dir / f"fold{i}" if out_dir is not None else None
        res = train(cfg, arrays.select(split.train_ids(i)), arrays.select(held), fold_dir)
        m = evaluate(res.model, arrays.select(held))
        log.info("fold %d: %s", i, m)
        fold_metrics.append(m)
    return aggregate_cv(fold_metrics, label, cfg.model.fusion, flags_of(cfg))


def run_holdout(cfg: RunConfig, train_arrays: CaseArrays, test_arrays: CaseArrays, seeds=None,
                out_dir=None, label: str = "", keep_models: bool = False):
    """Train once per seed on the training set and score the independent test set.

    Returns the report (one entry per seed in ``folds``) and, if requested,
    the trained models.
    """
    seeds = list(seeds if seeds is not None else cfg.experiment.seeds)
    per_seed, models = [], []
    for seed in seeds:
        scfg = cfg.replace({"train.seed": seed})
        seed_dir = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
        res = train(scfg, train_arrays, None, seed_dir)
        m = evaluate(res.model, test_arrays)
        m["seed"] = seed
        log.info("%s seed %d: %s", label, seed, m)
        per_seed.append(m)
        if keep_models:
            models.append(res.model)
    report = aggregate_cv(per_seed, label, cfg.model.fusion, flags_of(cfg))
    return (report, models) if keep_models else report
