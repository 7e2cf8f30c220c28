"""Experiment grids: fusion strategies with and without interaction modules,
the {ORI, HFE, CCA} ablation grid, the single-organ baseline, and Grad-CAM
localization on lesion-masked cases."""

from __future__ import annotations

import itertools
import logging
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datamodel import Grade
from .gradcam import gradcam_map, localization_score, save_heat
from .harness import CaseArrays, run_holdout
from .metrics import MetricsReport

log = logging.getLogger(__name__)

ABLATION_FLAGS = ("ori", "hfe", "cca")


def variant(cfg: RunConfig, fusion=None, ori=None, hfe=None, cca=None, organs=None) -> RunConfig:
    changes = {}
    if fusion is not None:
        changes["model.fusion"] = fusion
    if ori is not None:
        changes["model.use_ori"] = ori
    if hfe is not None:
        changes["model.use_hfe"] = hfe
    if cca is not None:
        changes["train.use_cca"] = cca
    if organs is not None:
        changes["model.organs"] = list(organs)
    return cfg.replace(changes) if changes else cfg


def single_organ(cfg: RunConfig) -> RunConfig:
    # the esophagus branch alone: no partners for ORI, no CCA pairs
    return variant(cfg, organs=["esophagus"], ori=False, cca=False, fusion="Concat")


def ablation_label(ori: bool, hfe: bool, cca: bool) -> str:
    on = [name.upper() for name, flag in zip(ABLATION_FLAGS, (ori, hfe, cca)) if flag]
    return "+".join(on) if on else "none"


class ExperimentRunner:
    """Trains each distinct configuration once (over all seeds) and caches the result.

    The fusion and ablation grids share configurations (full MOON and the
    no-interaction Concat model appear in both), so a runner instance keeps
    them consistent and avoids retraining.
    """

    def __init__(self, train_arrays: CaseArrays, test_arrays: CaseArrays, seeds, out_dir=None,
                 keep_models: bool = False):
        self.train_arrays = train_arrays
        self.test_arrays = test_arrays
        self.seeds = list(seeds)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.keep_models = keep_models
        self._cache: dict[str, tuple[MetricsReport, list]] = {}
        self._seconds: dict[str, float] = {}

    def _key(self, cfg: RunConfig) -> str:
        doc = cfg.to_json()
        doc["train"].pop("seed")
        doc.pop("experiment")
        doc.pop("data")
        return repr(doc)

    def run(self, cfg: RunConfig, label: str) -> MetricsReport:
        key = self._key(cfg)
        if key not in self._cache:
            run_dir = None
            if self.out_dir is not None:
                run_dir = self.out_dir / "runs" / f"run{len(self._cache):02d}"
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "resolved_config.json").write_text(cfg.dumps())
            start = time.perf_counter()
            report, models = run_holdout(cfg, self.train_arrays, self.test_arrays, self.seeds,
                                         run_dir, label, keep_models=True)
            self._seconds[key] = time.perf_counter() - start
            self._cache[key] = (report, models if self.keep_models else [])
        report, _ = self._cache[key]
        return MetricsReport(label, report.strategy, report.flags, report.folds, report.mean, report.std)

    def models(self, cfg: RunConfig) -> list:
        return self._cache[self._checked_key(cfg)][1]

    def seconds(self, cfg: RunConfig) -> float:
        """Wall time spent training and scoring ``cfg`` over all seeds."""
        return self._seconds[self._checked_key(cfg)]

    def _checked_key(self, cfg: RunConfig) -> str:
        key = self._key(cfg)
        if key not in self._cache:
            raise KeyError("configuration has not been run")
        return key


def fusion_grid(runner: ExperimentRunner, cfg: RunConfig, strategies=None,
                include_single_organ: bool = False) -> list[MetricsReport]:
    """Each fusion strategy with ORI+HFE (``MOON``) and without (``MOON‡``)."""
    strategies = strategies or cfg.experiment.strategies
    rows = []
    if include_single_organ:
        rows.append(runner.run(single_organ(cfg), "Single-organ (Eso.)"))
    for strategy in strategies:
        rows.append(runner.run(variant(cfg, fusion=strategy, ori=False, hfe=False), f"MOON‡ ({strategy})"))
        rows.append(runner.run(variant(cfg, fusion=strategy, ori=True, hfe=True), f"MOON ({strategy})"))
    return rows


def ablation_grid(runner: ExperimentRunner, cfg: RunConfig) -> list[MetricsReport]:
    """All 8 on/off combinations of ORI, HFE and the CCA loss term."""
    rows = []
    for ori, hfe, cca in itertools.product((False, True), repeat=3):
        rows.append(runner.run(variant(cfg, ori=ori, hfe=hfe, cca=cca), ablation_label(ori, hfe, cca)))
    return rows


def lesion_cases(arrays: CaseArrays, n: int, grade=Grade.G3) -> CaseArrays:
    if arrays.masks is None:
        raise ValueError("dataset has no lesion masks")
    idx = [i for i, g in enumerate(arrays.grades) if g == int(grade) and arrays.masks[i].any()]
    if len(idx) < n:
        raise ValueError(f"only {len(idx)} {Grade(grade).name} cases with lesions, need {n}")
    return arrays.take(idx[:n])


def localization(model, arrays: CaseArrays, organ: str = "esophagus", target="G3", out_dir=None) -> np.ndarray:
    """Per-case localization score of the model's heat volumes against the lesion masks."""
    scores = []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for i, cid in enumerate(arrays.ids):
        vols = {o: v[i] for o, v in arrays.volumes.items()}
        heat = gradcam_map(model, vols, organ, target)
        scores.append(localization_score(heat.data, arrays.masks[i]))
        if out_dir is not None:
            save_heat(heat, Path(out_dir) / f"{cid}_{organ}_heat.vol")
    return np.array(scores)
