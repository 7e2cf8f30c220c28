"""Command-line entry point: ``moon <subcommand> [--config C] [--set k=v ...] [--out DIR]``.

Exit codes: 0 success, 1 runtime error, 2 bad configuration key or value,
3 missing input file. Errors are printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .config import ConfigKeyError, RunConfig, load_config
from .datamodel import DatasetManifest, Grade, atomic_write_text
from .experiments import ExperimentRunner, ablation_grid, fusion_grid, lesion_cases, localization
from .gradcam import gradcam_map, write_pgm_slices
from .harness import evaluate, flags_of, load_arrays, load_checkpoint, run_crossval, run_holdout, train
from .metrics import MetricsReport, aggregate_cv, format_table, reports_to_json
from .synth import synthesize_dataset

log = logging.getLogger("moon")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "synthesize": "write a synthetic phantom dataset and manifest",
        "train": "train one model on data.manifest (validating on data.test_manifest if set)",
        "evaluate": "score a checkpoint, or train per seed and score the test manifest",
        "crossval": "stratified k-fold cross-validation on data.manifest",
        "compare-fusion": "fusion strategies with and without ORI+HFE",
        "ablate": "all 8 ORI/HFE/CCA on-off combinations",
        "gradcam": "Grad-CAM heat volumes and lesion localization for a checkpoint",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", default="default", help="preset name (default, desk) or JSON file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable; VALUE is parsed as JSON when possible")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--seed", type=int, help="sets train.seed, synth.seed and experiment.seeds")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("evaluate", "gradcam"):
            s.add_argument("--checkpoint", help="checkpoint written by `train`")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.replace({"train.seed": args.seed, "synth.seed": args.seed, "experiment.seeds": [args.seed]})
    return cfg


def _manifest(path, what: str) -> DatasetManifest:
    if not path:
        raise ConfigKeyError(what, f"{what} must be set (use --set {what}=PATH)")
    return DatasetManifest.load(path)


def _write_reports(out: Path, reports: list[MetricsReport]) -> None:
    atomic_write_text(out / "metrics.json", reports_to_json(reports))
    atomic_write_text(out / "metrics.txt", format_table(reports) + "\n")


def _label(cfg: RunConfig) -> str:
    if cfg.model.organs == ("esophagus",):
        return "Single-organ (Eso.)"
    mark = "" if cfg.model.ori_active and cfg.model.use_hfe else "‡"
    return f"MOON{mark} ({cfg.model.fusion})"


def cmd_synthesize(cfg: RunConfig, out: Path, args) -> None:
    manifest = synthesize_dataset(cfg.synth, out)
    counts = Counter(int(c.grade) for c in manifest.cases)
    summary = {"cases": len(manifest), "per_grade": {Grade(g).name: counts.get(g, 0) for g in (1, 2, 3)}}
    atomic_write_text(out / "metrics.json", json.dumps(summary, indent=1))
    atomic_write_text(out / "metrics.txt", f"{len(manifest)} cases {summary['per_grade']}\n")


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    train_arrays = load_arrays(_manifest(cfg.data.manifest, "data.manifest"))
    val_arrays = load_arrays(DatasetManifest.load(cfg.data.test_manifest)) if cfg.data.test_manifest else None
    res = train(cfg, train_arrays, val_arrays, out)
    scored = val_arrays if val_arrays is not None else train_arrays
    m = evaluate(res.model, scored)
    _write_reports(out, [aggregate_cv([m], _label(res.config), res.config.model.fusion, flags_of(res.config))])


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> None:
    if args.checkpoint:
        model, ckpt_cfg, _ = load_checkpoint(_existing(args.checkpoint))
        path = cfg.data.test_manifest or cfg.data.manifest
        arrays = load_arrays(_manifest(path, "data.test_manifest"))
        m = evaluate(model, arrays)
        report = aggregate_cv([m], _label(ckpt_cfg), ckpt_cfg.model.fusion, flags_of(ckpt_cfg))
    else:
        train_arrays = load_arrays(_manifest(cfg.data.manifest, "data.manifest"))
        test_arrays = load_arrays(_manifest(cfg.data.test_manifest, "data.test_manifest"))
        report = run_holdout(cfg, train_arrays, test_arrays, out_dir=out, label=_label(cfg))
    _write_reports(out, [report])


def cmd_crossval(cfg: RunConfig, out: Path, args) -> None:
    manifest = _manifest(cfg.data.manifest, "data.manifest")
    report = run_crossval(cfg, manifest, cfg.data.k, out, _label(cfg))
    _write_reports(out, [report])


def _runner(cfg: RunConfig, out: Path) -> ExperimentRunner:
    train_arrays = load_arrays(_manifest(cfg.data.manifest, "data.manifest"))
    test_arrays = load_arrays(_manifest(cfg.data.test_manifest, "data.test_manifest"))
    return ExperimentRunner(train_arrays, test_arrays, cfg.experiment.seeds, out)


def cmd_compare_fusion(cfg: RunConfig, out: Path, args) -> None:
    rows = fusion_grid(_runner(cfg, out), cfg, include_single_organ=cfg.experiment.include_single_organ)
    _write_reports(out, rows)


def cmd_ablate(cfg: RunConfig, out: Path, args) -> None:
    _write_reports(out, ablation_grid(_runner(cfg, out), cfg))


def cmd_gradcam(cfg: RunConfig, out: Path, args) -> None:
    if not args.checkpoint:
        raise ConfigKeyError("--checkpoint", "gradcam needs --checkpoint")
    model, _, _ = load_checkpoint(_existing(args.checkpoint))
    path = cfg.data.test_manifest or cfg.data.manifest
    arrays = lesion_cases(load_arrays(_manifest(path, "data.test_manifest")), cfg.experiment.gradcam_cases)
    ex = cfg.experiment
    heat_dir = out / "heat"
    scores = localization(model, arrays, ex.gradcam_organ, ex.gradcam_target, heat_dir)
    first = {o: v[0] for o, v in arrays.volumes.items()}
    write_pgm_slices(gradcam_map(model, first, ex.gradcam_organ, ex.gradcam_target).data,
                     out / "slices", prefix=arrays.ids[0])
    doc = {
        "organ": ex.gradcam_organ, "target": ex.gradcam_target,
        "cases": arrays.ids, "localization": scores.tolist(), "mean_localization": float(np.mean(scores)),
    }
    atomic_write_text(out / "metrics.json", json.dumps(doc, indent=1))
    atomic_write_text(out / "metrics.txt", f"mean localization {doc['mean_localization']:.4f} over {len(scores)} cases\n")


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} not found")
    return p


COMMANDS = {
    "synthesize": cmd_synthesize, "train": cmd_train, "evaluate": cmd_evaluate, "crossval": cmd_crossval,
    "compare-fusion": cmd_compare_fusion, "ablate": cmd_ablate, "gradcam": cmd_gradcam,
}


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "resolved_config.json", cfg.dumps() + "\n")
        COMMANDS[args.command](cfg, out, args)
    except ConfigKeyError as exc:
        return _fail(EXIT_CONFIG, "config", exc.message, key=exc.key)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc))
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable error
        log.debug("command failed", exc_info=True)
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
