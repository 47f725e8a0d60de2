"""Classification metrics and their aggregation/delta reporting.

The three reported metrics are balanced accuracy (mean per-class recall),
macro F1 and Cohen's kappa, all computed from a confusion matrix.  Runs are
aggregated as mean +/- population standard deviation; condition comparisons
are signed differences (A - B) with gain/loss direction tags.

Zero-division policy: classes absent from y_true are excluded from the
balanced-accuracy mean; classes absent from both y_true and y_pred are
excluded from macro F1, and a class with P + R = 0 contributes F1 = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .validation import check_labels

METRIC_NAMES = ("balanced_accuracy", "macro_f1", "cohen_kappa")


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K count matrix; entry (i, j) = trials with true class i predicted j."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if counts.min(initial=0) < 0:
            raise ValueError("confusion counts must be >= 0")
        object.__setattr__(self, "counts", counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def confusion_matrix(y_true, y_pred, n_classes: int) -> ConfusionMatrix:
    """Tally a confusion matrix from parallel label sequences."""
    n_classes = int(n_classes)
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    t = check_labels(y_true, n_classes)
    p = check_labels(y_pred, n_classes)
    if t.shape[0] != p.shape[0]:
        raise ValueError(f"length mismatch: {t.shape[0]} true vs {p.shape[0]} predicted")
    if t.shape[0] == 0:
        raise ValueError("need at least one prediction")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall over classes that occur in y_true."""
    rows = cm.row_sums()
    present = rows > 0
    if not present.any():
        raise ValueError("balanced accuracy undefined for an all-zero matrix")
    recalls = np.diag(cm.counts)[present] / rows[present]
    return float(recalls.mean())


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean F1 over classes present in y_true or y_pred."""
    rows = cm.row_sums()
    cols = cm.col_sums()
    if cm.total == 0:
        raise ValueError("macro F1 undefined for an all-zero matrix")
    scores = []
    for k in range(cm.n_classes):
        if rows[k] == 0 and cols[k] == 0:
            continue
        tp = cm.counts[k, k]
        precision = tp / cols[k] if cols[k] > 0 else 0.0
        recall = tp / rows[k] if rows[k] > 0 else 0.0
        if precision + recall == 0.0:
            scores.append(0.0)
        else:
            scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def cohen_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e)."""
    n = cm.total
    if n < 1:
        raise ValueError("kappa undefined for an empty matrix")
    p_o = float(np.trace(cm.counts)) / n
    p_e = float(np.sum(cm.row_sums() * cm.col_sums())) / (n * n)
    if p_e >= 1.0:
        raise ValueError("undefined kappa: expected agreement is 1")
    return (p_o - p_e) / (1.0 - p_e)


@dataclass(frozen=True)
class MetricReport:
    """The metric triplet plus the confusion matrix for one evaluation run."""

    balanced_accuracy: float
    macro_f1: float
    cohen_kappa: float
    confusion: ConfusionMatrix

    def metrics(self) -> dict[str, float]:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "macro_f1": self.macro_f1,
            "cohen_kappa": self.cohen_kappa,
        }

    def to_dict(self) -> dict:
        out: dict = dict(self.metrics())
        out["confusion"] = self.confusion.counts.tolist()
        return out


def evaluate(y_true, y_pred, n_classes: int) -> MetricReport:
    """Compute the full metric triplet from parallel label sequences."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    return MetricReport(
        balanced_accuracy=balanced_accuracy(cm),
        macro_f1=macro_f1(cm),
        cohen_kappa=cohen_kappa(cm),
        confusion=cm,
    )


@dataclass(frozen=True)
class AggregateResult:
    """Per-metric mean and population standard deviation over K runs."""

    means: dict[str, float]
    stds: dict[str, float]
    n_runs: int

    def metrics(self) -> dict[str, float]:
        return dict(self.means)

    def to_dict(self) -> dict:
        return {"means": dict(self.means), "stds": dict(self.stds), "n_runs": self.n_runs}


def _metric_map(report) -> dict[str, float]:
    if isinstance(report, Mapping):
        return {str(k): float(v) for k, v in report.items()}
    return report.metrics()


def aggregate(reports: Sequence) -> AggregateResult:
    """Mean +/- population std (denominator K) per metric over K reports."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    maps = [_metric_map(r) for r in reports]
    names = list(maps[0])
    for m in maps[1:]:
        if list(m) != names:
            raise ValueError("metric set mismatch across reports")
    means = {}
    stds = {}
    for name in names:
        values = np.array([m[name] for m in maps], dtype=np.float64)
        means[name] = float(values.mean())
        stds[name] = float(values.std())
    return AggregateResult(means=means, stds=stds, n_runs=len(maps))


@dataclass(frozen=True)
class DeltaReport:
    """Signed per-metric difference A - B with direction tags."""

    label_a: str
    label_b: str
    deltas: dict[str, float]
    directions: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "a": self.label_a,
            "b": self.label_b,
            "deltas": dict(self.deltas),
            "directions": dict(self.directions),
        }


def direction_tag(value: float) -> str:
    if value > 0:
        return "gain"
    if value < 0:
        return "loss"
    return "flat"


def delta(a, b, label_a: str = "a", label_b: str = "b") -> DeltaReport:
    """Per-metric difference a - b between two reports of the same kind."""
    ma = _metric_map(a)
    mb = _metric_map(b)
    if set(ma) != set(mb):
        raise ValueError(
            f"metric set mismatch: {sorted(ma)} vs {sorted(mb)}"
        )
    deltas = {}
    directions = {}
    for name in ma:
        d = ma[name] - mb[name]
        if not math.isfinite(d):
            raise ValueError(f"non-finite delta for metric '{name}'")
        deltas[name] = d
        directions[name] = direction_tag(d)
    return DeltaReport(label_a=label_a, label_b=label_b, deltas=deltas, directions=directions)
