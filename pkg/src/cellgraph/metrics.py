"""Accuracy, rank-based AUC, ROC point series, fold aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .serialization import atomic_write_text


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(pred == labels))


def auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with ties counted one half; ``None`` if one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels, drop_intermediate: bool = False):
    """(fpr, tpr, thresholds), one point per distinct score in descending order.

    The first point is (0, 0) at threshold +inf; the last is (1, 1).  With
    ``drop_intermediate`` collinear interior points are removed (area unchanged).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thr = np.r_[np.inf, s[last]]
    if drop_intermediate and len(fpr) > 2:
        keep = np.ones(len(fpr), dtype=bool)
        # cross product of neighbouring segments; zero means collinear
        d1x, d1y = fpr[1:-1] - fpr[:-2], tpr[1:-1] - tpr[:-2]
        d2x, d2y = fpr[2:] - fpr[1:-1], tpr[2:] - tpr[1:-1]
        keep[1:-1] = np.abs(d1x * d2y - d1y * d2x) > 1e-15
        fpr, tpr, thr = fpr[keep], tpr[keep], thr[keep]
    return fpr, tpr, thr


def trapezoid_area(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr), np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_export(scores, labels, path, drop_intermediate: bool = False) -> None:
    """Write ``fpr\\ttpr\\tthreshold`` rows, highest threshold first."""
    fpr, tpr, thr = roc_curve(scores, labels, drop_intermediate)
    lines = ["fpr\ttpr\tthreshold"]
    for f, t, h in zip(fpr, tpr, thr):
        lines.append(f"{format(f, '.17g')}\t{format(t, '.17g')}\t{'inf' if np.isinf(h) else format(h, '.17g')}")
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_roc(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.genfromtxt(path, delimiter="\t", skip_header=1, dtype=np.float64)
    data = data.reshape(-1, 3)
    return data[:, 0], data[:, 1], data[:, 2]


@dataclass
class FoldMetrics:
    fold: int
    accuracy: float
    auc: float | None
    n: int
    roc: dict | None = None

    def to_dict(self) -> dict:
        return {"fold": self.fold, "accuracy": self.accuracy, "auc": self.auc, "n": self.n,
                "roc": self.roc}


@dataclass
class RunMetrics:
    folds: list[FoldMetrics] = field(default_factory=list)

    @staticmethod
    def _mean_std(values) -> tuple[float | None, float | None]:
        vals = [v for v in values if v is not None]
        if not vals:
            return None, None
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return float(np.mean(vals)), std

    def summary(self) -> dict:
        am, asd = self._mean_std(f.accuracy for f in self.folds)
        um, usd = self._mean_std(f.auc for f in self.folds)
        return {"accuracy_mean": am, "accuracy_std": asd, "auc_mean": um, "auc_std": usd}

    def to_dict(self) -> dict:
        return {"folds": [f.to_dict() for f in self.folds], "summary": self.summary()}

    def table(self) -> str:
        rows = [f"{'fold':>6}  {'n':>5}  {'accuracy':>9}  {'auc':>7}"]
        for f in self.folds:
            a = "null" if f.auc is None else f"{f.auc:.4f}"
            rows.append(f"{f.fold:>6}  {f.n:>5}  {f.accuracy:>9.4f}  {a:>7}")
        s = self.summary()

        def pm(m, sd):
            return "null" if m is None else f"{m:.4f} ± {sd:.4f}"

        rows.append(f"{'mean':>6}  {'':>5}  accuracy {pm(s['accuracy_mean'], s['accuracy_std'])}"
                    f"  auc {pm(s['auc_mean'], s['auc_std'])}")
        return "\n".join(rows)


def fold_metrics(fold: int, probs, labels) -> FoldMetrics:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    pred = (probs > 0.5).astype(int)
    roc = None
    if 0 < labels.sum() < len(labels):
        fpr, tpr, thr = roc_curve(probs, labels)
        roc = {"fpr": fpr.tolist(), "tpr": tpr.tolist(),
               "threshold": [None if np.isinf(t) else float(t) for t in thr]}
    return FoldMetrics(fold, accuracy(pred, labels), auc(probs, labels), len(labels), roc)
