"""Binary-task accuracy/AUC and cross-validation aggregation in the two-task table layout."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

METRICS = ("acc_geG2", "auc_geG2", "acc_G3", "auc_G3")


class UndefinedAUCError(ValueError):
    pass


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds).astype(int)
    labels = np.asarray(labels).astype(int)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set")
    return 100.0 * float(np.mean(preds == labels))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError("AUC needs both positive and negative labels")
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (pos.size * neg.size))


def task_metrics(grades_pred, grades_true, scores_geG2, scores_G3) -> dict[str, float]:
    """ACC from binarised ordinal predictions and AUC from threshold probabilities."""
    gp = np.asarray(grades_pred)
    gt = np.asarray(grades_true)
    out = {}
    for task, thr, scores in (("geG2", 2, scores_geG2), ("G3", 3, scores_G3)):
        y = (gt >= thr).astype(int)
        out[f"acc_{task}"] = accuracy((gp >= thr).astype(int), y)
        try:
            out[f"auc_{task}"] = auc(scores, y)
        except UndefinedAUCError:
            out[f"auc_{task}"] = float("nan")
    out["acc_3class"] = accuracy(gp, gt)
    return out


@dataclass
class MetricsReport:
    label: str = ""
    strategy: str = ""
    flags: dict = field(default_factory=dict)
    folds: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc) -> "MetricsReport":
        return cls(**doc)

    def mean_task_auc(self) -> float:
        return 0.5 * (self.mean["auc_geG2"] + self.mean["auc_G3"])


def aggregate_cv(fold_metrics: list[dict], label: str = "", strategy: str = "", flags=None) -> MetricsReport:
    """Unweighted mean and sample standard deviation of each metric across folds."""
    if len(fold_metrics) < 1:
        raise ValueError("no folds to aggregate")
    keys = [k for k in fold_metrics[0] if all(k in f for f in fold_metrics)]
    mean, std = {}, {}
    for k in keys:
        vals = np.array([f[k] for f in fold_metrics], dtype=float)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return MetricsReport(label, strategy, dict(flags or {}), [dict(f) for f in fold_metrics], mean, std)


def _cell(report, key):
    m = report.mean.get(key, float("nan"))
    s = report.std.get(key, float("nan"))
    if key.startswith("acc"):
        return f"{m:5.1f}±{s:.1f}"
    # AUC spread in percent, like the accuracy columns
    return f"{m:.3f}±{100 * s:.1f}" if not math.isnan(m) else "  n/a"


def format_table(reports: list[MetricsReport]) -> str:
    """Aligned text table: one row per report, columns task x metric."""
    header = ["Method", ">=G2 ACC", ">=G2 AUC", "G3 ACC", "G3 AUC"]
    rows = [[r.label] + [_cell(r, k) for k in METRICS] for r in reports]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    fmt = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, widths))  # noqa: E731
    lines = [fmt(header), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def reports_to_json(reports: list[MetricsReport]) -> str:
    return json.dumps({"rows": [r.to_json() for r in reports]}, indent=1, sort_keys=True)
