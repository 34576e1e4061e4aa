"""Dice similarity coefficient, IoU / mIoU, and per-sample metric reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != np.bool_:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be a binary mask")
        arr = arr.astype(bool)
    return arr


def _pair(P, G) -> tuple:
    P, G = _binary(P, "P"), _binary(G, "G")
    if P.shape != G.shape:
        raise ValueError(f"mask shapes differ: {P.shape} vs {G.shape}")
    return P, G


def dsc(P, G) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1.0."""
    P, G = _pair(P, G)
    total = int(P.sum()) + int(G.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(P, G).sum()) / total


def iou(P, G) -> float:
    """``|P & G| / |P | G|``; two empty masks score 1.0."""
    P, G = _pair(P, G)
    inter = int(np.logical_and(P, G).sum())
    union = int(P.sum()) + int(G.sum()) - inter
    if union == 0:
        return 1.0
    return inter / union


def miou(P, G) -> float:
    """Unweighted mean IoU over classes; masks are ``C x ...`` stacks, one per class."""
    P, G = np.asarray(P), np.asarray(G)
    if P.ndim < 1 or P.shape[0] != G.shape[0]:
        raise ValueError(f"class count mismatch: {P.shape} vs {G.shape}")
    return float(np.mean([iou(P[c], G[c]) for c in range(P.shape[0])]))


def class_masks(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels)
    return np.stack([labels == c for c in classes])


def confusion_counts_oracle(P, G) -> dict:
    """Reference pixel counts by explicit iteration (no vectorisation)."""
    P = np.asarray(P).reshape(-1).tolist()
    G = np.asarray(G).reshape(-1).tolist()
    if len(P) != len(G):
        raise ValueError("mask sizes differ")
    inter = np_ = ng = 0
    for a, b in zip(P, G):
        if a not in (0, 1, True, False) or b not in (0, 1, True, False):
            raise ValueError("masks must be binary")
        if a:
            np_ += 1
        if b:
            ng += 1
        if a and b:
            inter += 1
    return {"intersection": inter, "P": np_, "G": ng}


# --- reports ---------------------------------------------------------------------------


@dataclass
class MetricRow:
    sample_id: str
    class_id: str
    dsc: float
    iou: float


@dataclass
class EvalReport:
    """Per-sample, per-class scores plus foreground averages."""

    class_names: Dict[int, str]
    rows: List[MetricRow] = field(default_factory=list)

    def class_mean(self, class_id: int, key: str = "dsc") -> float:
        vals = [getattr(r, key) for r in self.rows if r.class_id == str(class_id)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def class_dsc(self) -> Dict[str, float]:
        return {name: self.class_mean(c) for c, name in self.class_names.items()}

    @property
    def avg_dsc(self) -> float:
        return float(np.mean([self.class_mean(c) for c in self.class_names]))

    @property
    def miou(self) -> float:
        return float(np.mean([self.class_mean(c, "iou") for c in self.class_names]))

    def summary_rows(self) -> List[tuple]:
        """``(label, dsc, iou)`` per foreground class, then the ``avg`` row."""
        out = [(name, self.class_mean(c), self.class_mean(c, "iou"))
               for c, name in self.class_names.items()]
        out.append(("avg", self.avg_dsc, self.miou))
        return out

    def format_table(self) -> str:
        lines = [f"{'class':<20}{'DSC(%)':>10}{'IoU(%)':>10}"]
        for name, d, i in self.summary_rows():
            lines.append(f"{name:<20}{100 * d:>10.2f}{100 * i:>10.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "class_id", "dsc", "iou"])
        for r in self.rows:
            w.writerow([r.sample_id, r.class_id, repr(r.dsc), repr(r.iou)])
        for c in self.class_names:
            w.writerow(["all", str(c), repr(self.class_mean(c)), repr(self.class_mean(c, "iou"))])
        w.writerow(["all", "avg", repr(self.avg_dsc), repr(self.miou)])
        return buf.getvalue()


def evaluate_labels(pred: Sequence[np.ndarray], truth: Sequence[np.ndarray],
                    class_names: Dict[int, str],
                    sample_ids: Optional[Sequence[str]] = None) -> EvalReport:
    """Score predicted label maps against ground truth for the listed classes."""
    if len(pred) != len(truth):
        raise ValueError(f"{len(pred)} predictions for {len(truth)} targets")
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(pred))]
    report = EvalReport(dict(class_names))
    for sid, p, g in zip(ids, pred, truth):
        for c in class_names:
            pm, gm = np.asarray(p) == c, np.asarray(g) == c
            report.rows.append(MetricRow(str(sid), str(c), dsc(pm, gm), iou(pm, gm)))
    return report
