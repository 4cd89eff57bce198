"""
Room-level detection metrics and attribution localization.

All thresholded metrics use the empirical step functions over distinct scores;
tied scores form one block and are admitted together.
"""

from __future__ import annotations
import dataclasses
from dataclasses import dataclass
from typing import Collection, Dict, Hashable, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import average_precision_score, precision_recall_curve, roc_curve

from acmil.errors import MetricError


def _validate(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise MetricError("no rooms to evaluate")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    y = y.astype(np.int64)
    if y.min() == y.max():
        raise MetricError(f"need at least one positive and one negative room, got {int(y.sum())} positives of {y.size}")
    return s, y


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision."""
    s, y = _validate(scores, labels)
    return float(average_precision_score(y, s))


def _roc(scores, labels):
    s, y = _validate(scores, labels)
    fpr, tpr, _ = roc_curve(y, s, drop_intermediate=False)
    return fpr, tpr


def recall_at_fpr(scores: Sequence[float], labels: Sequence[int], fpr_cap: float = 0.1) -> float:
    """Largest recall over thresholds whose false positive rate is at most ``fpr_cap``."""
    fpr, tpr = _roc(scores, labels)
    return float(tpr[fpr <= fpr_cap].max())


def fpr_at_recall(scores: Sequence[float], labels: Sequence[int], recall_floor: float = 0.9) -> float:
    """Smallest false positive rate over thresholds whose recall is at least ``recall_floor``."""
    fpr, tpr = _roc(scores, labels)
    return float(fpr[tpr >= recall_floor].min())


def best_f1(scores: Sequence[float], labels: Sequence[int]) -> Tuple[float, float]:
    """Maximum F1 over "score >= t" rules, t ranging over the distinct scores.

    Returns:
        (f1, threshold). On ties the highest threshold wins.
    """
    s, y = _validate(scores, labels)
    precision, recall, thresholds = precision_recall_curve(y, s)
    precision, recall = precision[:len(thresholds)], recall[:len(thresholds)]
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
    best = np.flatnonzero(f1 == f1.max())
    idx = best[np.argmax(thresholds[best])]
    return float(f1[idx]), float(thresholds[idx])


def f1_at_threshold(scores: Sequence[float], labels: Sequence[int], threshold: float) -> float:
    s, y = _validate(scores, labels)
    predicted = s >= threshold
    tp = int(np.sum(predicted & (y == 1)))
    fp = int(np.sum(predicted & (y == 0)))
    fn = int(np.sum(~predicted & (y == 1)))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def attribution_hit_rate(
    scores: Sequence[float],
    keys: Sequence[Hashable],
    planted: Collection[Hashable],
    top_k: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Optional[float]:
    """Fraction of planted capsules among the top_k capsules by attribution.

    Ties in attribution are broken at random (``rng``). Returns None when nothing is planted.
    """
    if not planted:
        return None
    if len(scores) != len(keys):
        raise MetricError(f"{len(scores)} attribution scores for {len(keys)} capsules")
    k = len(planted) if top_k is None else top_k
    if k < 1:
        raise MetricError(f"top_k must be >= 1, got {k}")
    if k >= len(keys):
        return 1.0
    rng = rng if rng is not None else np.random.default_rng(0)
    s = np.asarray(scores, dtype=np.float64)
    # lexsort: last key is primary
    order = np.lexsort((rng.random(s.size), -s))
    top = {keys[i] for i in order[:k]}
    return sum(1 for p in planted if p in top) / len(planted)


@dataclass
class MetricReport:
    pr_auc: float
    f1: float
    f1_threshold: float
    recall_at_fpr01: float
    fpr_at_recall09: float
    n_pos: int
    n_neg: int
    attribution_hit_rate: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)


def evaluate_scores(
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: Optional[float] = None,
    hit_rates: Optional[Sequence[Optional[float]]] = None,
) -> MetricReport:
    """Build a MetricReport.

    Args:
        scores: risk scores per room
        labels: 0/1 per room
        threshold: decision threshold chosen on validation data; when None, the
            best-F1 threshold of these scores is used
        hit_rates: per-room attribution hit rates (None entries skipped)
    """
    s, y = _validate(scores, labels)
    if threshold is None:
        f1, threshold = best_f1(s, y)
    else:
        f1 = f1_at_threshold(s, y, threshold)
    rates = [r for r in (hit_rates or ()) if r is not None]
    return MetricReport(
        pr_auc=pr_auc(s, y),
        f1=float(f1),
        f1_threshold=float(threshold),
        recall_at_fpr01=recall_at_fpr(s, y, 0.1),
        fpr_at_recall09=fpr_at_recall(s, y, 0.9),
        n_pos=int(y.sum()),
        n_neg=int(y.size - y.sum()),
        attribution_hit_rate=float(np.mean(rates)) if rates else None,
    )
