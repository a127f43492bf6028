"""Evaluation metrics: rank AUC and pixelwise precision / recall / F1."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic with midranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same size")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_undefined: bool = False
    recall_undefined: bool = False

    def as_tuple(self) -> tuple[float, float, float]:
        return self.precision, self.recall, self.f1


def prf(mask, truth) -> PRF:
    """Pixelwise counts; an undefined ratio is reported as 0 and flagged."""
    mask = np.asarray(mask).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if mask.shape != truth.shape:
        raise ValueError(f"shape mismatch {mask.shape} vs {truth.shape}")
    tp = int(np.sum(mask & truth))
    fp = int(np.sum(mask & ~truth))
    fn = int(np.sum(~mask & truth))
    return prf_from_counts(tp, fp, fn, int(mask.size - tp - fp - fn))


def prf_from_counts(tp: int, fp: int, fn: int, tn: int = 0) -> PRF:
    p_undef, r_undef = tp + fp == 0, tp + fn == 0
    precision = 0.0 if p_undef else tp / (tp + fp)
    recall = 0.0 if r_undef else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PRF(precision, recall, f1, tp, fp, fn, tn, p_undef, r_undef)


@dataclass
class EvalReport:
    auc_roc: float
    precision: float
    recall: float
    f1: float
    threshold: str
    tp: int
    fp: int
    tn: int
    fn: int
