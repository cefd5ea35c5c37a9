"""Label co-occurrence statistics and the influence-based label order."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

THRESHOLD = 0.5


def _strengths(strengths) -> np.ndarray:
    s = np.asarray(strengths, dtype=float)
    if s.ndim != 2:
        raise ValueError(f"strength table must be N x K, got shape {s.shape}")
    if s.size and (np.any(s < 0) or np.any(s > 1) or not np.all(np.isfinite(s))):
        raise ValueError("attribute strengths must lie in [0, 1]")
    return s


def cooccurrence_matrix(strengths) -> np.ndarray:
    """``R[i, j]``: fraction of samples with class ``i`` present that also have ``j``.

    A class is present when its strength is at least 0.5. Rows of classes that
    never occur are zero.
    """
    s = _strengths(strengths)
    if s.shape[0] == 0:
        raise ValueError("co-occurrence needs at least one sample")
    present = (s >= THRESHOLD).astype(np.int64)
    joint = present.T @ present
    counts = np.diag(joint).astype(float)
    return np.divide(joint, counts[:, None], out=np.zeros(joint.shape), where=counts[:, None] > 0)


def label_order(R) -> tuple[np.ndarray, np.ndarray]:
    """Influence ratios ``r_i = sum_j R[i, j] / sum_j R[j, i]`` and classes sorted by them.

    A zero denominator gives ``r_i = 0``. Ties keep ascending class index.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"R must be square, got {R.shape}")
    out_sum = R.sum(axis=1)
    in_sum = R.sum(axis=0)
    r = np.divide(out_sum, in_sum, out=np.zeros_like(out_sum), where=in_sum > 0)
    order = np.argsort(-r, kind="stable")
    return r, order


@dataclass
class DatasetStats:
    class_names: list[str]
    counts: np.ndarray
    multi_label: int
    total: int

    def as_row(self) -> dict[str, int]:
        row = {name: int(c) for name, c in zip(self.class_names, self.counts)}
        row[">1 label"] = self.multi_label
        row["Total"] = self.total
        return row


def dataset_stats(strengths, class_names=None) -> DatasetStats:
    """Per-class occurrence counts, samples with more than one label, and the total."""
    s = _strengths(strengths)
    present = s >= THRESHOLD
    if class_names is None:
        class_names = [f"class{k}" for k in range(s.shape[1])]
    return DatasetStats(list(class_names), present.sum(axis=0).astype(np.int64),
                        int((present.sum(axis=1) > 1).sum()), int(s.shape[0]))


@dataclass
class CooccurrenceReport:
    class_names: list[str]
    R: np.ndarray
    r: np.ndarray
    order: np.ndarray
    stats: DatasetStats

    @property
    def order_names(self) -> list[str]:
        return [self.class_names[i] for i in self.order]

    def write(self, out_dir) -> None:
        """Write ``cooccurrence.csv``, ``influence.csv`` and ``stats.csv`` into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "cooccurrence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + self.class_names)
            for name, row in zip(self.class_names, self.R):
                w.writerow([name] + [f"{v:.6f}" for v in row])
        with open(out / "influence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "class", "r"])
            for rank, k in enumerate(self.order, start=1):
                w.writerow([rank, self.class_names[k], f"{self.r[k]:.6f}"])
        with open(out / "stats.csv", "w", newline="") as fh:
            row = self.stats.as_row()
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)

    def summary(self) -> str:
        width = max(len(n) for n in self.class_names)
        lines = ["co-occurrence R(i,j):", " " * (width + 1) + " ".join(f"{n[:7]:>7}" for n in self.class_names)]
        for name, row in zip(self.class_names, self.R):
            lines.append(f"{name:>{width}} " + " ".join(f"{v:7.4f}" for v in row))
        lines.append("influence r: " + ", ".join(f"{n}={v:.4f}" for n, v in zip(self.class_names, self.r)))
        lines.append("label order: " + " -> ".join(self.order_names))
        lines.append("counts: " + ", ".join(f"{k}={v}" for k, v in self.stats.as_row().items()))
        return "\n".join(lines)


def analyze(strengths, class_names=None) -> CooccurrenceReport:
    s = _strengths(strengths)
    if class_names is None:
        class_names = [f"class{k}" for k in range(s.shape[1])]
    R = cooccurrence_matrix(s)
    r, order = label_order(R)
    return CooccurrenceReport(list(class_names), R, r, order, dataset_stats(s, class_names))
