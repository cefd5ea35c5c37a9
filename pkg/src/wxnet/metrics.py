"""Multi-label evaluation: per-class precision/recall, macro and overall scores."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


def _check(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"label matrices differ in shape: {truth.shape} vs {pred.shape}")
    if truth.ndim != 2 or truth.size == 0:
        raise ValueError(f"label matrices must be N x K with N, K >= 1, got {truth.shape}")
    for m in (truth, pred):
        if not np.isin(m, (0, 1)).all():
            raise ValueError("label matrices must be binary")
    return truth.astype(bool), pred.astype(bool)


def _ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def per_class_pr(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    """Per-class precision and recall; 0/0 counts as 0."""
    t, p = _check(truth, pred)
    tp = (t & p).sum(axis=0)
    return _ratio(tp, p.sum(axis=0)), _ratio(tp, t.sum(axis=0))


def macro_scores(precision, recall) -> tuple[float, float, float]:
    """``(AP, AR, AF1)``: mean precision, mean recall and their harmonic mean."""
    precision = np.asarray(precision, dtype=float)
    recall = np.asarray(recall, dtype=float)
    if precision.size == 0 or precision.shape != recall.shape:
        raise ValueError("need matching, non-empty precision and recall vectors")
    ap, ar = float(precision.mean()), float(recall.mean())
    return ap, ar, f1(ap, ar)


def overall_scores(truth, pred, mode: str = "tp") -> tuple[float, float, float]:
    """``(OP, OR, OF1)`` over all ``N x K`` label slots.

    ``tp`` mode counts true positives, normalized by predicted and actual
    positives. ``literal`` mode counts every slot where prediction equals
    truth (negatives included), normalized by ``N*K`` for OP and by the number
    of actual positives for OR, so its OR can exceed 1.
    """
    t, p = _check(truth, pred)
    if mode == "tp":
        hits = int((t & p).sum())
        op = float(_ratio(hits, p.sum()))
        orr = float(_ratio(hits, t.sum()))
    elif mode == "literal":
        hits = int((t == p).sum())
        op = hits / t.size
        positives = int(t.sum())
        if positives == 0:
            if hits:
                raise ZeroDivisionError("literal OR undefined: no positive labels but matching slots exist")
            orr = 0.0
        else:
            orr = hits / positives
    else:
        raise ValueError(f"unknown overall-score mode {mode!r}; expected 'tp' or 'literal'")
    return op, orr, f1(op, orr)


@dataclass
class MetricReport:
    class_names: list[str]
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    ar: float
    af1: float
    op: float
    or_: float
    of1: float
    mode: str = "tp"

    def as_row(self) -> dict[str, str]:
        row = {name: f"{p:.3f}/{r:.3f}" for name, p, r in zip(self.class_names, self.precision, self.recall)}
        for key, val in (("AP", self.ap), ("AR", self.ar), ("AF1", self.af1),
                         ("OP", self.op), ("OR", self.or_), ("OF1", self.of1)):
            row[key] = f"{val:.4f}"
        return row

    def to_csv(self, label: str | None = None) -> str:
        row = self.as_row()
        fields = list(row)
        if label is not None:
            fields = ["approach"] + fields
            row = {"approach": label, **row}
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()


def evaluate(truth, pred, class_names=None, mode: str = "tp") -> MetricReport:
    precision, recall = per_class_pr(truth, pred)
    if class_names is None:
        class_names = [f"class{k}" for k in range(precision.size)]
    ap, ar, af1 = macro_scores(precision, recall)
    op, orr, of1 = overall_scores(truth, pred, mode)
    return MetricReport(list(class_names), precision, recall, ap, ar, af1, op, orr, of1, mode)
