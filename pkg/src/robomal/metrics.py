"""Confusion-matrix accumulation and derived detection metrics.

Malware is the positive class (label 1). Two false-positive rates are
reported side by side: ``fpr_paper`` uses fp / (fp + tp), which makes
precision + fpr_paper == 1 by construction, while ``fpr_standard`` is the
textbook fp / (fp + tn). The report's FPR column shows the first variant
with the second alongside; both are always present. Any 0/0 metric is
None, rendered as "n/a", and excluded from averages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "fpr_paper", "fpr_standard", "fnr")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    fpr_paper: float | None
    fpr_standard: float | None
    fnr: float | None

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def confusion(predicted, truth) -> ConfusionMatrix:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape or predicted.ndim != 1 or predicted.size == 0:
        raise ValueError(
            f"need equal-length non-empty label vectors, got {predicted.shape} and {truth.shape}")
    for arr, which in ((predicted, "predicted"), (truth, "true")):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{which} labels must be 0 or 1")
    tp = int(np.sum((predicted == 1) & (truth == 1)))
    tn = int(np.sum((predicted == 0) & (truth == 0)))
    fp = int(np.sum((predicted == 1) & (truth == 0)))
    fn = int(np.sum((predicted == 0) & (truth == 1)))
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if precision is None or recall is None or precision + recall == 0.0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=precision,
        recall=recall,
        f1=f1,
        fpr_paper=_ratio(cm.fp, cm.fp + cm.tp),
        fpr_standard=_ratio(cm.fp, cm.fp + cm.tn),
        fnr=_ratio(cm.fn, cm.fn + cm.tp),
    )


def aggregate(reports: list[MetricsReport]) -> tuple[MetricsReport, dict[str, int]]:
    """Unweighted mean over folds; per metric, undefined folds are skipped.

    Returns the aggregate plus the count of folds that contributed to each
    metric's mean.
    """
    if not reports:
        raise ValueError("no fold reports to aggregate")
    means = {}
    counts = {}
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        counts[name] = len(values)
        means[name] = sum(values) / len(values) if values else None
    return MetricsReport(**means), counts


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def render_report_json(model: str, seed: int, per_fold: list[MetricsReport],
                       fold_sizes: list[int], loss_curves: list[list[float]],
                       curve_stride: int, max_steps: int = 0) -> str:
    agg, counts = aggregate(per_fold)
    doc = {
        "model": model,
        "seed": seed,
        "folds": len(per_fold),
        "max_steps": max_steps,
        "aggregate": agg.as_dict(),
        "defined_fold_counts": counts,
        "per_fold": [r.as_dict() for r in per_fold],
        "fold_test_sizes": fold_sizes,
        "loss_curve_stride": curve_stride,
        "loss_curves": loss_curves,
    }
    return json.dumps(doc, indent=2)


def parse_report_json(text: str) -> dict:
    doc = json.loads(text)
    for key in ("model", "aggregate", "per_fold"):
        if key not in doc:
            raise ValueError(f"report missing key {key!r}")
    return doc


def render_table(rows: list[tuple[str, dict]]) -> str:
    """Aligned text table over (model name, metrics dict) rows.

    Columns: Accuracy, Precision, Recall, F1, FPR (the fp/(fp+tp) variant),
    FPR(std), FNR.
    """
    headers = ["Model", "Accuracy", "Precision", "Recall", "F1", "FPR", "FPR(std)", "FNR"]
    keys = ["accuracy", "precision", "recall", "f1", "fpr_paper", "fpr_standard", "fnr"]
    table = [headers]
    for name, metrics in rows:
        table.append([name] + [_fmt(metrics.get(k)) for k in keys])
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
