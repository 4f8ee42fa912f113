"""Threshold-free scores for OOD detection and misclassification prediction.

Higher scores mean "more positive".  Ties get half credit in AUROC; in
average precision every tied block is scored at its end.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size != y.size or s.size < 1:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) must have equal length >= 1")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (P * N) from midranks."""
    s, y = _check(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision with tied scores grouped into blocks."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    block_pos = np.diff(np.r_[0, tp])
    return float(np.sum(block_pos * tp / seen) / n_pos)


def calibration_auroc(uncertainties, correct) -> float:
    """AUROC of the uncertainty at flagging mistakes (positive = wrong)."""
    correct = np.asarray(correct).astype(bool).reshape(-1)
    if correct.all() or not correct.any():
        raise ValueError("degenerate correctness: need both correct and incorrect predictions")
    return auroc(uncertainties, ~correct)


def accuracy(predicted, truth) -> float:
    p = np.asarray(predicted).reshape(-1)
    t = np.asarray(truth).reshape(-1)
    if p.size != t.size or p.size < 1:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    return float(np.mean(p == t))


def ood_report(in_scores, ood_scores) -> dict:
    """EvalReport for OOD detection; OOD inputs are the positive class."""
    in_scores = np.asarray(in_scores, dtype=np.float64).reshape(-1)
    ood_scores = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if in_scores.size == 0 or ood_scores.size == 0:
        raise ValueError("both in-distribution and OOD sets must be non-empty")
    scores = np.concatenate([in_scores, ood_scores])
    labels = np.r_[np.zeros(in_scores.size), np.ones(ood_scores.size)]
    return {"auroc": auroc(scores, labels), "auprc": auprc(scores, labels),
            "n_pos": int(ood_scores.size), "n_neg": int(in_scores.size)}
