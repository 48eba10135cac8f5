"""
Pixel-level confusion counts and the binary change-detection metrics.

Metrics are computed from pooled counts (micro averaging). A metric whose
denominator is zero is returned as :class:`UndefinedMetric`, a NaN that
records which metric failed and why.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError

__all__ = [
    "ConfusionCounts",
    "UndefinedMetric",
    "accumulate",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "iou",
    "kappa",
    "kappa_binary",
    "metric_suite",
    "format_table",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = ("accuracy", "iou", "precision", "recall", "f1", "kappa")


class UndefinedMetric(float):
    """NaN carrying the metric name and the reason it is undefined."""

    def __new__(cls, metric: str, reason: str):
        obj = super().__new__(cls, float("nan"))
        obj.metric = metric
        obj.reason = reason
        return obj

    def __repr__(self) -> str:
        return f"UndefinedMetric({self.metric!r}, {self.reason!r})"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def __radd__(self, other):
        # lets sum() start from 0
        if other == 0:
            return self
        return NotImplemented

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict:
        return asdict(self)


def accumulate(pred, truth) -> ConfusionCounts:
    """Per-pixel counts of a binary prediction against the reference mask."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(metric: str, num: int, den: int, why: str) -> float:
    if den == 0:
        return UndefinedMetric(metric, why)
    return num / den


def accuracy(c: ConfusionCounts) -> float:
    return _ratio("accuracy", c.tp + c.tn, c.total, "no pixels were compared")


def precision(c: ConfusionCounts) -> float:
    return _ratio("precision", c.tp, c.tp + c.fp, "no pixel was predicted positive")


def recall(c: ConfusionCounts) -> float:
    return _ratio("recall", c.tp, c.tp + c.fn, "the reference has no positive pixel")


def f1(c: ConfusionCounts) -> float:
    return _ratio("f1", 2 * c.tp, 2 * c.tp + c.fp + c.fn, "no positive pixel in prediction or reference")


def iou(c: ConfusionCounts) -> float:
    return _ratio("iou", c.tp, c.tp + c.fp + c.fn, "no positive pixel in prediction or reference")


def kappa(c: ConfusionCounts) -> float:
    """Cohen's kappa ``(P_o - P_e) / (1 - P_e)`` from observed and chance agreement.

    Evaluated as ``(n * (TP + TN) - S) / (n^2 - S)`` with ``S`` the sum of
    the marginal products, so the integer parts stay exact.
    """
    n = c.total
    s = (c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)
    if n == 0:
        return UndefinedMetric("kappa", "no pixels were compared")
    if n * n == s:
        return UndefinedMetric("kappa", "chance agreement is 1 (a single class in both maps)")
    return (n * (c.tp + c.tn) - s) / (n * n - s)


def kappa_binary(c: ConfusionCounts) -> float:
    """Closed binary form ``2(TP*TN - FN*FP) / [(TP+FP)(FP+TN) + (TP+FN)(FN+TN)]``."""
    den = (c.tp + c.fp) * (c.fp + c.tn) + (c.tp + c.fn) * (c.fn + c.tn)
    return _ratio("kappa", 2 * (c.tp * c.tn - c.fn * c.fp), den, "chance agreement is 1")


def metric_suite(c: ConfusionCounts) -> dict[str, float]:
    return {
        "accuracy": accuracy(c),
        "iou": iou(c),
        "precision": precision(c),
        "recall": recall(c),
        "f1": f1(c),
        "kappa": kappa(c),
    }


def _pct(v) -> str:
    return "n/a" if isinstance(v, UndefinedMetric) or v != v else f"{100.0 * v:.2f}"


def format_table(rows: dict[str, tuple[float | None, dict]]) -> str:
    """Aligned text table: one row per model, metrics as percentages.

    ``rows`` maps a model name to ``(threshold, metric_suite(...))``.
    """
    header = ["Model", "Threshold", "Accuracy", "IoU", "Precision", "Recall", "F1-Score", "Kappa"]
    lines = [header]
    for name, (tau, m) in rows.items():
        lines.append(
            [name, "-" if tau is None else f"{tau:.2f}"] + [_pct(m[k]) for k in METRIC_COLUMNS]
        )
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    out = []
    for k, r in enumerate(lines):
        out.append("  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(r)))
        if k == 0:
            out.append("  ".join("-" * wd for wd in widths))
    return "\n".join(out)


def suite_to_json(m: dict[str, float]) -> dict:
    """JSON-safe view: undefined metrics become ``null`` plus a reason."""
    out = {}
    for k, v in m.items():
        if isinstance(v, UndefinedMetric):
            out[k] = None
            out[f"{k}_undefined"] = v.reason
        else:
            out[k] = v
    return out


def report_json(rows: dict[str, tuple[float | None, dict]], counts: dict[str, ConfusionCounts] | None = None) -> str:
    doc = {}
    for name, (tau, m) in rows.items():
        entry = {"threshold": tau, **suite_to_json(m)}
        if counts and name in counts:
            entry["counts"] = counts[name].as_dict()
        doc[name] = entry
    return json.dumps(doc, indent=2, sort_keys=True)
