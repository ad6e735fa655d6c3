"""Classification metrics reported in percent."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError

METRICS = ("ACC", "F1", "SPE", "SEN", "AUC")


def _ratio(a, b):
    return 100.0 * a / b if b else 0.0


def auc_mann_whitney(scores, is_pos) -> float:
    """Probability a random positive outscores a random negative; ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    is_pos = np.asarray(is_pos, dtype=bool)
    n_pos, n_neg = int(is_pos.sum()), int((~is_pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative subjects")
    ranks = rankdata(scores)
    return (ranks[is_pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def compute_metrics(p_final, labels, positive_class: int = 1) -> dict:
    p = np.asarray(p_final, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pred = np.argmax(p, axis=1)  # first maximum wins ties
    acc = 100.0 * float(np.mean(pred == y)) if y.size else 0.0
    K = p.shape[1]
    if K != 2:
        f1s = []
        for c in range(K):
            tp = np.sum((pred == c) & (y == c))
            f1s.append(_ratio(2 * tp, 2 * tp + np.sum((pred == c) & (y != c)) + np.sum((pred != c) & (y == c))))
        return {"ACC": acc, "F1": float(np.mean(f1s)), "SPE": None, "SEN": None, "AUC": None}
    pos = y == positive_class
    hit = pred == positive_class
    tp, fn = int(np.sum(hit & pos)), int(np.sum(~hit & pos))
    tn, fp = int(np.sum(~hit & ~pos)), int(np.sum(hit & ~pos))
    return {
        "ACC": acc,
        "F1": _ratio(2 * tp, 2 * tp + fp + fn),
        "SPE": _ratio(tn, tn + fp),
        "SEN": _ratio(tp, tp + fn),
        "AUC": float(100.0 * auc_mann_whitney(p[:, positive_class], pos)),
    }
