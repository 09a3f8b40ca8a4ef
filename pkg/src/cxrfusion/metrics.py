"""Confusion-matrix metrics with normal-approximation confidence intervals.

All rates are one-vs-rest per class:

    TPR  = TP / (TP + FN)          (sensitivity, recall)
    PPV  = TP / (TP + FP)          (precision)
    SPEC = TN / (TN + FP)          (specificity)
    ACC  = (TP + TN) / N           (per-class accuracy)

Macro values are arithmetic means over classes. The macro F1 is computed from
the macro TPR and macro PPV, F1 = 2*TPR*PPV / (TPR + PPV); the mean of
per-class F1 scores is a different number and is reported separately. Micro
accuracy (trace / N) is likewise reported under its own name and is never
substituted for the macro average.

A metric with a zero denominator is undefined (None), which is distinct from
0.0; undefined values are excluded from macro averages with a warning.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from cxrfusion.labels import CLASS_NAMES, N_CLASSES

# Two-sided 95% normal quantile.
Z_95 = 1.95996


class MetricUndefinedWarning(UserWarning):
    """A rate had a zero denominator and was excluded from macro averaging."""


# ---------------------------------------------------------------------------
# Confusion matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix3:
    """3x3 integer confusion matrix; rows are true classes, columns predicted."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"confusion matrix must be 3x3, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise ValueError("confusion matrix entries must be integers")
            arr = arr.astype(np.int64)
        if np.any(arr < 0):
            raise ValueError("confusion matrix entries must be non-negative")
        object.__setattr__(self, "counts", arr.astype(np.int64))

    @classmethod
    def from_pairs(cls, y_true, y_pred) -> "ConfusionMatrix3":
        yt = np.asarray(y_true, dtype=np.int64)
        yp = np.asarray(y_pred, dtype=np.int64)
        if yt.shape != yp.shape:
            raise ValueError(f"label arrays differ in shape: {yt.shape} vs {yp.shape}")
        if yt.size and (yt.min() < 0 or yt.max() >= N_CLASSES or yp.min() < 0 or yp.max() >= N_CLASSES):
            raise ValueError(f"labels must lie in [0, {N_CLASSES})")
        counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        for t, p in zip(yt.ravel(), yp.ravel()):
            counts[t, p] += 1
        return cls(counts)

    def __add__(self, other: "ConfusionMatrix3") -> "ConfusionMatrix3":
        return ConfusionMatrix3(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def class_totals(self) -> np.ndarray:
        """Row sums: number of true items per class."""
        return self.counts.sum(axis=1)

    def predicted_totals(self) -> np.ndarray:
        """Column sums: number of predicted items per class."""
        return self.counts.sum(axis=0)

    def micro_accuracy(self) -> float:
        """trace / N: fraction of all items classified correctly."""
        if self.total == 0:
            raise ValueError("micro accuracy undefined for an empty matrix")
        return float(np.trace(self.counts)) / self.total

    def misclassified(self) -> int:
        return self.total - int(np.trace(self.counts))


def sum_confusions(matrices: list[ConfusionMatrix3]) -> ConfusionMatrix3:
    """Elementwise sum of per-fold matrices into one pooled matrix."""
    if not matrices:
        raise ValueError("need at least one matrix to sum")
    out = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for m in matrices:
        out += m.counts
    return ConfusionMatrix3(out)


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------


def _rate(num: int, den: int, name: str, cls: str) -> float | None:
    if den == 0:
        warnings.warn(
            f"{name} undefined for class {cls!r}: zero denominator",
            MetricUndefinedWarning,
            stacklevel=3,
        )
        return None
    return num / den


@dataclass(frozen=True)
class ClassMetrics:
    """One-vs-rest rates for a single class. None marks an undefined rate."""

    tp: int
    fn: int
    fp: int
    tn: int
    tpr: float | None
    ppv: float | None
    spec: float | None
    acc: float | None
    f1: float | None


def per_class_metrics(cm: ConfusionMatrix3) -> dict[str, ClassMetrics]:
    """One-vs-rest TPR/PPV/SPEC/ACC/F1 for each class, keyed by class name."""
    n = cm.total
    out: dict[str, ClassMetrics] = {}
    for idx, name in enumerate(CLASS_NAMES):
        tp = int(cm.counts[idx, idx])
        fn = int(cm.counts[idx].sum()) - tp
        fp = int(cm.counts[:, idx].sum()) - tp
        tn = n - tp - fn - fp
        tpr = _rate(tp, tp + fn, "TPR", name)
        ppv = _rate(tp, tp + fp, "PPV", name)
        spec = _rate(tn, tn + fp, "SPEC", name)
        acc = _rate(tp + tn, n, "ACC", name)
        if tpr is None or ppv is None or (tpr + ppv) == 0:
            f1 = None
        else:
            f1 = 2.0 * tpr * ppv / (tpr + ppv)
        out[name] = ClassMetrics(tp=tp, fn=fn, fp=fp, tn=tn, tpr=tpr, ppv=ppv, spec=spec, acc=acc, f1=f1)
    return out


@dataclass(frozen=True)
class MacroMetrics:
    """Arithmetic means over classes; undefined per-class values are excluded."""

    tpr: float | None
    ppv: float | None
    spec: float | None
    acc: float | None
    f1: float | None
    f1_per_class_mean: float | None


def _mean_defined(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def macro_average(per_class: dict[str, ClassMetrics]) -> MacroMetrics:
    """Macro rates over classes; macro F1 derives from macro TPR and PPV."""
    tpr = _mean_defined([m.tpr for m in per_class.values()])
    ppv = _mean_defined([m.ppv for m in per_class.values()])
    spec = _mean_defined([m.spec for m in per_class.values()])
    acc = _mean_defined([m.acc for m in per_class.values()])
    if tpr is None or ppv is None or (tpr + ppv) == 0:
        f1 = None
    else:
        f1 = 2.0 * tpr * ppv / (tpr + ppv)
    f1_mean = _mean_defined([m.f1 for m in per_class.values()])
    return MacroMetrics(tpr=tpr, ppv=ppv, spec=spec, acc=acc, f1=f1, f1_per_class_mean=f1_mean)


# ---------------------------------------------------------------------------
# Confidence intervals
# ---------------------------------------------------------------------------


def ci_halfwidth(p: float, n: int, z: float = Z_95) -> float:
    """Normal-approximation half-width z*sqrt(p*(1-p)/n).

    Args:
        p: proportion in [0, 1].
        n: sample count backing the proportion.
        z: normal quantile (default two-sided 95%).

    Returns:
        Half-width in the same units as p (multiply by 100 for percent).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    return z * math.sqrt(p * (1.0 - p) / n)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

_METRIC_COLUMNS = ("tpr", "ppv", "spec", "acc", "f1")


@dataclass(frozen=True)
class MetricsReport:
    """Per-class and macro rates with half-width CIs, plus micro accuracy.

    ci_n_mode selects the n used for per-class CIs:
      - "total": N for every rate (pooled denominator).
      - "per_class": each rate's own denominator (TP+FN for TPR, TP+FP for
        PPV, TN+FP for SPEC, N for ACC; F1 keeps N as it has no count).
    Macro CIs always use N.
    """

    confusion: ConfusionMatrix3
    per_class: dict[str, ClassMetrics]
    macro: MacroMetrics
    micro_accuracy: float
    ci_n_mode: str
    z: float
    per_class_ci: dict[str, dict[str, float | None]] = field(default_factory=dict)
    macro_ci: dict[str, float | None] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def cm_dict(m: ClassMetrics) -> dict:
            return {
                "tp": m.tp, "fn": m.fn, "fp": m.fp, "tn": m.tn,
                "tpr": m.tpr, "ppv": m.ppv, "spec": m.spec, "acc": m.acc, "f1": m.f1,
            }

        return {
            "confusion": self.confusion.counts.tolist(),
            "n": self.confusion.total,
            "per_class": {k: cm_dict(v) for k, v in self.per_class.items()},
            "per_class_ci": self.per_class_ci,
            "macro": {
                "tpr": self.macro.tpr, "ppv": self.macro.ppv, "spec": self.macro.spec,
                "acc": self.macro.acc, "f1": self.macro.f1,
                "f1_per_class_mean": self.macro.f1_per_class_mean,
            },
            "macro_ci": self.macro_ci,
            "micro_accuracy": self.micro_accuracy,
            "misclassified": self.confusion.misclassified(),
            "ci_n_mode": self.ci_n_mode,
            "z": self.z,
        }

    def to_csv(self) -> str:
        """Comma-separated table: one row per class plus an average row.

        Cells hold "value ±ci" in percent, or "undefined" where a rate has no
        value. Micro accuracy is appended as its own clearly-labeled row.
        """
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class"] + [c.upper() for c in _METRIC_COLUMNS])
        for name in CLASS_NAMES:
            m = self.per_class[name]
            cis = self.per_class_ci.get(name, {})
            writer.writerow([name] + [_cell(getattr(m, col), cis.get(col)) for col in _METRIC_COLUMNS])
        writer.writerow(["average"] + [
            _cell(getattr(self.macro, col), self.macro_ci.get(col)) for col in _METRIC_COLUMNS
        ])
        writer.writerow(["micro_accuracy", _cell(self.micro_accuracy, None), "", "", "", ""])
        return buf.getvalue()


def _cell(value: float | None, ci: float | None) -> str:
    if value is None:
        return "undefined"
    text = f"{100.0 * value:.2f}"
    if ci is not None:
        text += f" ±{100.0 * ci:.2f}"
    return text


def _ci_or_none(p: float | None, n: int, z: float) -> float | None:
    if p is None or n <= 0:
        return None
    return ci_halfwidth(p, n, z)


def build_report(cm: ConfusionMatrix3, ci_n_mode: str = "total", z: float = Z_95) -> MetricsReport:
    """Full metrics report for one pooled confusion matrix."""
    if ci_n_mode not in ("total", "per_class"):
        raise ValueError(f"ci_n_mode must be 'total' or 'per_class', got {ci_n_mode!r}")
    per_class = per_class_metrics(cm)
    macro = macro_average(per_class)
    n = cm.total
    per_class_ci: dict[str, dict[str, float | None]] = {}
    for name, m in per_class.items():
        if ci_n_mode == "total":
            ns = {col: n for col in _METRIC_COLUMNS}
        else:
            ns = {
                "tpr": m.tp + m.fn,
                "ppv": m.tp + m.fp,
                "spec": m.tn + m.fp,
                "acc": n,
                "f1": n,
            }
        per_class_ci[name] = {
            col: _ci_or_none(getattr(m, col), ns[col], z) for col in _METRIC_COLUMNS
        }
    macro_ci = {
        col: _ci_or_none(getattr(macro, col), n, z) for col in _METRIC_COLUMNS
    }
    return MetricsReport(
        confusion=cm,
        per_class=per_class,
        macro=macro,
        micro_accuracy=cm.micro_accuracy(),
        ci_n_mode=ci_n_mode,
        z=z,
        per_class_ci=per_class_ci,
        macro_ci=macro_ci,
    )
