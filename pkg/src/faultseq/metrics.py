"""Multi-label classification metrics.

AUROC is computed on the pooled (instance, class) score pairs with midrank
tie handling. Precision/recall/F1 are thresholded and aggregated three
ways: micro (pooled counts), macro (per class, then unweighted mean), and
sample (per instance, then mean). When a denominator is empty, the metric
is 1 if the paired count is also empty (nothing predicted and nothing
true) and 0 otherwise, which keeps empty label sets well defined.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

AVERAGINGS = ("micro", "macro", "sample")


def _midranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_micro(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank-statistic AUROC over all pooled pairs; None when undefined."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(s)
    pos_rank_sum = ranks[y].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _safe_ratio(num: float, den: float, other: float) -> float:
    """num/den with the empty-denominator convention driven by ``other``."""
    if den > 0:
        return num / den
    return 1.0 if other == 0 else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


def prf1(
    scores: np.ndarray,
    labels: np.ndarray,
    threshold: float = 0.8,
    averaging: str = "micro",
) -> tuple[float, float, float]:
    """Precision, recall, F1 at ``scores >= threshold``."""
    if averaging not in AVERAGINGS:
        raise ValueError(f"averaging must be one of {AVERAGINGS}, got {averaging!r}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    y = np.asarray(labels).astype(bool)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    tp = pred & y
    if averaging == "micro":
        p = _safe_ratio(tp.sum(), pred.sum(), y.sum())
        r = _safe_ratio(tp.sum(), y.sum(), pred.sum())
        return p, r, _f1(p, r)
    axis = 0 if averaging == "macro" else 1
    tp_c = tp.sum(axis=axis).astype(float)
    pred_c = pred.sum(axis=axis).astype(float)
    true_c = y.sum(axis=axis).astype(float)
    ps = np.array([_safe_ratio(t, q, w) for t, q, w in zip(tp_c, pred_c, true_c)])
    rs = np.array([_safe_ratio(t, w, q) for t, q, w in zip(tp_c, pred_c, true_c)])
    fs = np.array([_f1(p, r) for p, r in zip(ps, rs)])
    return float(ps.mean()), float(rs.mean()), float(fs.mean())


@dataclass(frozen=True)
class MetricsReport:
    auroc_micro: float | None
    precision_micro: float
    recall_micro: float
    f1_micro: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    precision_sample: float
    recall_sample: float
    f1_sample: float
    threshold: float

    def is_complete(self) -> bool:
        return self.auroc_micro is not None

    def to_dict(self) -> dict:
        return {
            "AUROC (Micro)": self.auroc_micro,
            "Precision (Micro)": self.precision_micro,
            "Recall (Micro)": self.recall_micro,
            "F1 Score (Micro)": self.f1_micro,
            "Precision (Macro)": self.precision_macro,
            "Recall (Macro)": self.recall_macro,
            "F1 Score (Macro)": self.f1_macro,
            "Precision (Sample)": self.precision_sample,
            "Recall (Sample)": self.recall_sample,
            "F1 Score (Sample)": self.f1_sample,
            "threshold": self.threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.8) -> MetricsReport:
    p_mi, r_mi, f_mi = prf1(scores, labels, threshold, "micro")
    p_ma, r_ma, f_ma = prf1(scores, labels, threshold, "macro")
    p_sa, r_sa, f_sa = prf1(scores, labels, threshold, "sample")
    return MetricsReport(
        auroc_micro=auroc_micro(scores, labels),
        precision_micro=p_mi, recall_micro=r_mi, f1_micro=f_mi,
        precision_macro=p_ma, recall_macro=r_ma, f1_macro=f_ma,
        precision_sample=p_sa, recall_sample=r_sa, f1_sample=f_sa,
        threshold=threshold,
    )
