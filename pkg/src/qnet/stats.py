"""Classification metrics, ROC/AUC, the paired DeLong test, bootstrap AUC
distributions and the majority-vote scan baseline.

The positive class is HH everywhere: sensitivity is the HH detection
rate. Scores are probabilities (or any monotone score) for the positive
class; labels are 0/1 integers with 1 = HH.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POSITIVE_LABEL = "HH"
NEGATIVE_LABEL = "HC"
SCORE_TABLE_HEADER = ["subject_id", "slice_index", "label", "p_hh", "model", "mode"]


def label_to_int(label: str) -> int:
    if label == POSITIVE_LABEL:
        return 1
    if label == NEGATIVE_LABEL:
        return 0
    raise ValueError(f"unknown label {label!r}")


# ---------------------------------------------------------------------------
# confusion metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, pred, truth):
        c = cls()
        for p, t in zip(pred, truth):
            if t == 1:
                c.tp += p == 1
                c.fn += p == 0
            else:
                c.fp += p == 1
                c.tn += p == 0
        return c


def confusion_metrics(c: ConfusionCounts) -> dict:
    """Accuracy, sensitivity, specificity and F1. A metric whose
    denominator is zero is reported as None rather than NaN."""
    out = {}
    out["accuracy"] = (c.tp + c.tn) / c.total if c.total else None
    out["sensitivity"] = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    out["specificity"] = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    recall = out["sensitivity"]
    if precision is None or recall is None or precision + recall == 0:
        out["f1"] = None
    else:
        out["f1"] = 2 * precision * recall / (precision + recall)
    return out


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------

@dataclass
class RocCurve:
    points: list                 # ordered (fpr, tpr), (0,0) .. (1,1)
    auc: float
    n_pos: int
    n_neg: int


def roc_auc(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores. The trapezoidal area equals
    the Mann-Whitney statistic with ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = int((labels == 1).sum())
    n = int((labels == 0).sum())
    if m == 0 or n == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            tp += labels[order[j]] == 1
            fp += labels[order[j]] == 0
            j += 1
        points.append((fp / n, tp / m))
        i = j
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return RocCurve(points=points, auc=auc, n_pos=m, n_neg=n)


def auc_pair_count(scores, labels) -> float:
    """Brute-force Mann-Whitney pair counting (independent oracle)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for x in pos:
        for y in neg:
            if x > y:
                total += 1.0
            elif x == y:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# DeLong paired test
# ---------------------------------------------------------------------------

@dataclass
class DeLongResult:
    auc1: float
    auc2: float
    std_error: float
    z_score: float
    p_value: float
    significance: str
    degenerate: bool = False


def z_to_p(z: float) -> float:
    """Two-sided normal tail probability, clamped into (0, 1]."""
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return max(p, 5e-324)


def p_to_significance(p: float) -> str:
    """Right-inclusive significance bands: ns, *, **, ***, ****."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p-value {p} outside (0, 1]")
    if p <= 0.0001:
        return "****"
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return "ns"


def _structural_components(scores, labels):
    """V10 per positive and V01 per negative (naive O(m*n) midrank-free)."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    psi = np.where(pos[:, None] > neg[None, :], 1.0,
                   np.where(pos[:, None] == neg[None, :], 0.5, 0.0))
    return psi.mean(axis=1), psi.mean(axis=0)


def delong_test(scores1, scores2, labels) -> DeLongResult:
    """Paired test of AUC equality for two score vectors over one item set."""
    scores1 = np.asarray(scores1, dtype=np.float64)
    scores2 = np.asarray(scores2, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores1.shape != scores2.shape or scores1.shape != labels.shape:
        raise ValueError("score vectors and labels must share one shape")
    m = int((labels == 1).sum())
    n = int((labels == 0).sum())
    if m == 0 or n == 0:
        raise ValueError("delong_test needs both classes present")
    v10 = np.empty((2, m))
    v01 = np.empty((2, n))
    v10[0], v01[0] = _structural_components(scores1, labels)
    v10[1], v01[1] = _structural_components(scores2, labels)
    # report AUCs through the ROC path (bit-identical to roc_auc); the
    # structural components equal them mathematically and feed the covariance
    aucs = (roc_auc(scores1, labels).auc, roc_auc(scores2, labels).auc)
    delta = float(aucs[0] - aucs[1])
    if m > 1 and n > 1:
        s10 = np.cov(v10, ddof=1)
        s01 = np.cov(v01, ddof=1)
        var = ((s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m
               + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n)
    else:
        var = 0.0
    if var <= 0.0:
        if delta == 0.0:
            return DeLongResult(aucs[0], aucs[1], 0.0, 0.0, 1.0, "ns")
        p = 5e-324
        return DeLongResult(aucs[0], aucs[1], 0.0, math.inf if delta > 0 else -math.inf,
                            p, p_to_significance(p), degenerate=True)
    se = math.sqrt(var)
    z = delta / se
    p = z_to_p(z)
    return DeLongResult(float(aucs[0]), float(aucs[1]), se, z, p, p_to_significance(p))


# ---------------------------------------------------------------------------
# bootstrap AUC distribution
# ---------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    aucs: np.ndarray
    median: float
    q1: float
    q3: float


def bootstrap_auc(scores, labels, n_boot=1000, seed=0) -> BootstrapResult:
    """Stratified resampling with replacement, class counts preserved.
    Resample b draws from rng [seed, b], so results are order-independent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise ValueError("bootstrap_auc needs both classes present")
    aucs = np.empty(n_boot)
    for b in range(n_boot):
        rng = np.random.default_rng([seed, b])
        pi = rng.choice(pos_idx, size=len(pos_idx), replace=True)
        ni = rng.choice(neg_idx, size=len(neg_idx), replace=True)
        idx = np.concatenate([pi, ni])
        aucs[b] = roc_auc(scores[idx], labels[idx]).auc
    return BootstrapResult(aucs=aucs,
                           median=float(np.median(aucs)),
                           q1=float(np.percentile(aucs, 25)),
                           q3=float(np.percentile(aucs, 75)))


# ---------------------------------------------------------------------------
# majority vote
# ---------------------------------------------------------------------------

def majority_vote(pred_labels, p_hh=None) -> str:
    """Scan label from slice predictions. Ties go to the class favoured by
    the mean HH probability; a tie there too goes to HC."""
    pred_labels = list(pred_labels)
    if not pred_labels:
        raise ValueError("majority_vote needs at least one prediction")
    n_hh = sum(1 for lab in pred_labels if lab == POSITIVE_LABEL)
    n_hc = len(pred_labels) - n_hh
    if n_hh > n_hc:
        return POSITIVE_LABEL
    if n_hc > n_hh:
        return NEGATIVE_LABEL
    if p_hh is not None and float(np.mean(p_hh)) > 0.5:
        return POSITIVE_LABEL
    return NEGATIVE_LABEL


def vote_from_probs(p_hh) -> str:
    """Majority vote with slice predictions thresholded at 0.5."""
    labels = [POSITIVE_LABEL if p > 0.5 else NEGATIVE_LABEL for p in p_hh]
    return majority_vote(labels, p_hh)


# ---------------------------------------------------------------------------
# score tables (CSV)
# ---------------------------------------------------------------------------

@dataclass
class ScoreRow:
    subject_id: str
    slice_index: int             # -1 marks a scan-level row
    label: str
    p_hh: float
    model: str
    mode: str


def write_score_table(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_TABLE_HEADER)
        for r in rows:
            writer.writerow([r.subject_id, r.slice_index, r.label,
                             repr(float(r.p_hh)), r.model, r.mode])


def read_score_table(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SCORE_TABLE_HEADER:
            raise ValueError(f"{path}: unexpected score table header {header}")
        for rec in reader:
            rows.append(ScoreRow(subject_id=rec[0], slice_index=int(rec[1]),
                                 label=rec[2], p_hh=float(rec[3]),
                                 model=rec[4], mode=rec[5]))
    return rows


def write_roc_points(curve: RocCurve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr"])
        for x, y in curve.points:
            writer.writerow([repr(float(x)), repr(float(y))])


def write_bootstrap_samples(result: BootstrapResult, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["resample", "auc"])
        for i, a in enumerate(result.aucs):
            writer.writerow([i, repr(float(a))])
