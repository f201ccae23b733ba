"""Confusion matrices and the OA / AA / Kappa / precision-recall-F1 suite.

Degenerate cases never raise; they return the documented convention value
and record a string in ``flags``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

CHANGE_NAMES = ("No Change", "Change")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, rows = truth, cols = prediction

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, preds, labels) -> "ConfusionMatrix":
        preds, labels = np.asarray(preds, dtype=np.int64).ravel(), np.asarray(labels, dtype=np.int64).ravel()
        if preds.shape != labels.shape:
            raise ValidationError(f"{len(preds)} predictions vs {len(labels)} labels")
        for name, v in (("prediction", preds), ("label", labels)):
            if v.size and (v.min() < 0 or v.max() >= self.K):
                raise ValidationError(f"{name} out of range [0, {self.K})")
        np.add.at(self.counts, (labels, preds), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.K != self.K:
            raise ValidationError(f"cannot merge {self.K}-class and {other.K}-class matrices")
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(preds, labels, num_classes: int) -> ConfusionMatrix:
    return ConfusionMatrix.empty(num_classes).accumulate(preds, labels)


def _require_total(cm: ConfusionMatrix):
    if cm.total == 0:
        raise ValidationError("metrics need a non-empty confusion matrix")


def overall_accuracy(cm: ConfusionMatrix) -> float:
    _require_total(cm)
    return float(np.trace(cm.counts) / cm.total)


def average_accuracy(cm: ConfusionMatrix, flags: list | None = None) -> float:
    """Mean per-class recall over classes that occur in the truth."""
    _require_total(cm)
    rows = cm.counts.sum(1)
    present = rows > 0
    if not present.all() and flags is not None:
        flags.append(f"AA: excluded empty truth rows {np.flatnonzero(~present).tolist()}")
    recall = np.diag(cm.counts)[present] / rows[present]
    return float(recall.mean())


def kappa(cm: ConfusionMatrix, flags: list | None = None) -> float:
    _require_total(cm)
    n = cm.total
    p_o = np.trace(cm.counts) / n
    p_e = float((cm.counts.sum(1) * cm.counts.sum(0)).sum()) / n**2
    if p_e == 1.0:
        if flags is not None:
            flags.append("Kappa: degenerate p_e = 1")
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1 - p_e))


def _safe_ratio(num, den, what: str, flags: list | None):
    out = np.zeros_like(num, dtype=np.float64)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    if not ok.all() and flags is not None:
        flags.append(f"{what}: zero denominator for classes {np.flatnonzero(~ok).tolist()}")
    return out


@dataclass
class PRF:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro: dict
    weighted: dict
    flags: list = field(default_factory=list)


def prf_suite(cm: ConfusionMatrix) -> PRF:
    _require_total(cm)
    flags: list[str] = []
    tp = np.diag(cm.counts).astype(np.float64)
    support = cm.counts.sum(1)
    precision = _safe_ratio(tp, cm.counts.sum(0).astype(np.float64), "precision", flags)
    recall = _safe_ratio(tp, support.astype(np.float64), "recall", flags)
    f1 = _safe_ratio(2 * precision * recall, precision + recall, "F1", flags)
    weights = support / support.sum()
    macro = {"precision": float(precision.mean()), "recall": float(recall.mean()), "f1": float(f1.mean())}
    weighted = {
        "precision": float(weights @ precision),
        "recall": float(weights @ recall),
        "f1": float(weights @ f1),
    }
    return PRF(precision, recall, f1, support, macro, weighted, flags)


def metrics_report(cm: ConfusionMatrix, names=None) -> dict:
    """Machine-readable report: confusion counts, headline numbers, P/R/F1 rows."""
    flags: list[str] = []
    prf = prf_suite(cm)
    flags += prf.flags
    names = list(names) if names is not None else [f"Class {k}" for k in range(cm.K)]
    rows = [
        {"name": name, "precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
        for name, p, r, f, s in zip(names, prf.precision, prf.recall, prf.f1, prf.support)
    ]
    total = int(prf.support.sum())
    rows.append({"name": "Macro Avg.", **prf.macro, "support": total})
    rows.append({"name": "Weighted Avg.", **prf.weighted, "support": total})
    return {
        "confusion": cm.counts.tolist(),
        "OA": overall_accuracy(cm),
        "AA": average_accuracy(cm, flags),
        "Kappa": kappa(cm, flags),
        "rows": rows,
        "flags": flags,
    }


def render_table(report: dict, title: str = "") -> str:
    """Aligned text table: one row per class, then Macro Avg. and Weighted Avg."""
    width = max([len(r["name"]) for r in report["rows"]] + [13])
    lines = [title] if title else []
    lines.append(f"{'':<{width}}  {'Precision':>9}  {'Recall':>9}  {'F1-score':>9}  {'Support':>7}")
    for r in report["rows"]:
        if r["name"] == "Macro Avg.":
            lines.append("")
        lines.append(
            f"{r['name']:<{width}}  {100 * r['precision']:9.2f}  {100 * r['recall']:9.2f}  "
            f"{100 * r['f1']:9.2f}  {r['support']:7d}"
        )
    lines.append("")
    lines.append(f"OA {100 * report['OA']:.2f}  AA {100 * report['AA']:.2f}  Kappa {100 * report['Kappa']:.2f}")
    for flag in report["flags"]:
        lines.append(f"note: {flag}")
    return "\n".join(lines)


def dumps(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
