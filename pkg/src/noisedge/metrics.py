"""Pixel-level precision/recall/F1 and rank-based AUC, with CSV reports.

AUC is the Mann-Whitney statistic: the probability that a randomly chosen
positive pixel scores higher than a randomly chosen negative one, ties
counted half. An image whose ground truth has no positive or no negative
pixels has no defined AUC; such images keep their P/R/F1 row but are
excluded from the AUC mean and tallied in the report.
"""
from __future__ import annotations

import numpy as np

DEFAULT_THRESHOLD = 0.5


def prf1(pred: np.ndarray, gt: np.ndarray, threshold: float = DEFAULT_THRESHOLD):
    """(precision, recall, f1) with >= threshold as positive; 0 on empty denominators."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and target shapes differ: {pred.shape} vs {gt.shape}")
    pos = pred >= threshold
    truth = gt.astype(bool)
    tp = np.count_nonzero(pos & truth)
    fp = np.count_nonzero(pos & ~truth)
    fn = np.count_nonzero(~pos & truth)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores: np.ndarray, gt: np.ndarray) -> float | None:
    """Rank-based AUC; None when either class is empty."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(gt).astype(bool).ravel()
    if scores.shape != truth.shape:
        raise ValueError(f"scores and target sizes differ: {scores.shape} vs {truth.shape}")
    n_pos = int(np.count_nonzero(truth))
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    rank_sum = ranks[truth].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


class MetricReport:
    """Per-image metric rows plus an aggregate MEAN row.

    ``aggregate='per-image'`` averages the per-image rows; ``'pooled'``
    recomputes every metric over all pixels concatenated, which weighs
    large tampered regions more.
    """

    def __init__(self, threshold: float = DEFAULT_THRESHOLD,
                 aggregate: str = "per-image"):
        if aggregate not in ("per-image", "pooled"):
            raise ValueError(f"unknown aggregate mode {aggregate!r}")
        self.threshold = threshold
        self.aggregate = aggregate
        self.rows: list[tuple[str, float, float, float, float | None]] = []
        self._pooled_pred: list[np.ndarray] = []
        self._pooled_gt: list[np.ndarray] = []

    def add(self, image_id: str, pred: np.ndarray, gt: np.ndarray) -> None:
        p, r, f = prf1(pred, gt, self.threshold)
        a = auc(pred, gt)
        self.rows.append((image_id, p, r, f, a))
        if self.aggregate == "pooled":
            self._pooled_pred.append(np.asarray(pred, dtype=np.float64).ravel())
            self._pooled_gt.append(np.asarray(gt).astype(bool).ravel())

    @property
    def n_auc_excluded(self) -> int:
        return sum(1 for row in self.rows if row[4] is None)

    def mean_row(self) -> tuple[float, float, float, float | None]:
        if not self.rows:
            raise ValueError("no images in report")
        if self.aggregate == "pooled":
            pred = np.concatenate(self._pooled_pred)
            gt = np.concatenate(self._pooled_gt)
            p, r, f = prf1(pred, gt, self.threshold)
            return p, r, f, auc(pred, gt)
        p = float(np.mean([row[1] for row in self.rows]))
        r = float(np.mean([row[2] for row in self.rows]))
        f = float(np.mean([row[3] for row in self.rows]))
        aucs = [row[4] for row in self.rows if row[4] is not None]
        return p, r, f, (float(np.mean(aucs)) if aucs else None)

    @staticmethod
    def _fmt(value: float | None) -> str:
        return "nan" if value is None else f"{value:.6f}"

    def to_csv(self) -> str:
        lines = ["image_id,precision,recall,f1,auc"]
        for image_id, p, r, f, a in self.rows:
            lines.append(f"{image_id},{p:.6f},{r:.6f},{f:.6f},{self._fmt(a)}")
        mp, mr, mf, ma = self.mean_row()
        lines.append(f"MEAN,{mp:.6f},{mr:.6f},{mf:.6f},{self._fmt(ma)}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())
