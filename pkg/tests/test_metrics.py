import numpy as np
import pytest

from acmil.errors import MetricError
from acmil.metrics import (
    attribution_hit_rate,
    best_f1,
    evaluate_scores,
    f1_at_threshold,
    fpr_at_recall,
    pr_auc,
    recall_at_fpr,
)


# ---- brute-force threshold enumeration ----

def _confusion(s, y, t):
    predicted = s >= t
    tp = int(np.sum(predicted & (y == 1)))
    fp = int(np.sum(predicted & (y == 0)))
    return tp, fp


def _oracle_points(s, y):
    """(threshold, tp, fp) for every "score >= t" rule, highest threshold first, plus the empty rule."""
    points = [(np.inf, 0, 0)]
    for t in sorted(set(s.tolist()), reverse=True):
        points.append((t,) + _confusion(s, y, t))
    return points


def _oracle_ap(s, y):
    n_pos = y.sum()
    ap, prev_recall = 0.0, 0.0
    for _, tp, fp in _oracle_points(s, y)[1:]:
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def _oracle_recall_at_fpr(s, y, cap):
    n_pos, n_neg = y.sum(), (1 - y).sum()
    return max(tp / n_pos for _, tp, fp in _oracle_points(s, y) if fp / n_neg <= cap)


def _oracle_fpr_at_recall(s, y, floor):
    n_pos, n_neg = y.sum(), (1 - y).sum()
    return min(fp / n_neg for _, tp, fp in _oracle_points(s, y) if tp / n_pos >= floor)


def _oracle_f1(s, y, t):
    tp, fp = _confusion(s, y, t)
    fn = int(y.sum()) - tp
    return 2 * tp / (2 * tp + fp + fn)


def _random_sets(count=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 31))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        rng.shuffle(y)
        # coarse scores so ties are common
        s = rng.integers(0, 12, size=n) / 12.0 if rng.random() < 0.5 else rng.random(n)
        yield s, y


def test_metrics_match_threshold_enumeration():
    for s, y in _random_sets():
        assert pr_auc(s, y) == pytest.approx(_oracle_ap(s, y), abs=1e-12)
        assert recall_at_fpr(s, y, 0.1) == pytest.approx(_oracle_recall_at_fpr(s, y, 0.1), abs=1e-12)
        assert recall_at_fpr(s, y, 0.3) == pytest.approx(_oracle_recall_at_fpr(s, y, 0.3), abs=1e-12)
        assert fpr_at_recall(s, y, 0.9) == pytest.approx(_oracle_fpr_at_recall(s, y, 0.9), abs=1e-12)
        f1, threshold = best_f1(s, y)
        best = max(_oracle_f1(s, y, t) for t in set(s.tolist()))
        assert f1 == pytest.approx(best, abs=1e-12)
        assert _oracle_f1(s, y, threshold) == pytest.approx(best, abs=1e-12)
        assert f1_at_threshold(s, y, threshold) == pytest.approx(best, abs=1e-12)


def test_metrics_are_invariant_under_monotone_transforms():
    for s, y in _random_sets(count=50, seed=1):
        t = np.exp(2.0 * s) + 3.0
        assert pr_auc(t, y) == pytest.approx(pr_auc(s, y), abs=1e-12)
        assert recall_at_fpr(t, y) == pytest.approx(recall_at_fpr(s, y), abs=1e-12)
        assert fpr_at_recall(t, y) == pytest.approx(fpr_at_recall(s, y), abs=1e-12)
        assert best_f1(t, y)[0] == pytest.approx(best_f1(s, y)[0], abs=1e-12)


# ---- worked examples ----

def test_pr_auc_examples():
    assert pr_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert pr_auc([0.5] * 10, [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]) == pytest.approx(0.3)
    assert pr_auc([0.9, 0.4, 0.35, 0.1], [1, 0, 1, 0]) == pytest.approx(0.5 * (1 + 2 / 3), abs=1e-4)


def test_recall_at_fpr_examples():
    assert recall_at_fpr([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    scores = [0.9] * 20 + [0.1, 0.1]
    labels = [0] * 20 + [1, 1]
    assert recall_at_fpr(scores, labels) == 0.0
    assert recall_at_fpr([0.3, 0.9, 0.5], [1, 0, 0], fpr_cap=1.0) == 1.0


def test_fpr_at_recall_examples():
    assert fpr_at_recall([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.0
    assert fpr_at_recall([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 1.0
    assert fpr_at_recall([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.5


def test_best_f1_examples():
    assert best_f1([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == (1.0, 0.8)
    f1, threshold = best_f1([0.95, 0.6, 0.3], [1, 0, 0])
    assert (f1, threshold) == (1.0, 0.95)
    # admitting the negative to reach the second positive: P=2/3, R=1
    f1, threshold = best_f1([0.9, 0.8, 0.2], [1, 0, 1])
    assert f1 == pytest.approx(0.8)
    assert threshold == pytest.approx(0.2)


def test_best_f1_prefers_the_highest_tied_threshold():
    # t=0.9 -> F1 2/3; t=0.5 -> F1 2/3 (tp=2, fp=2)
    f1, threshold = best_f1([0.9, 0.5, 0.5, 0.5, 0.1], [1, 1, 0, 0, 0])
    assert f1 == pytest.approx(2 / 3)
    assert threshold == 0.9


def test_f1_at_threshold_admits_ties():
    assert f1_at_threshold([0.5, 0.5, 0.2], [1, 0, 0], 0.5) == pytest.approx(2 / 3)
    assert f1_at_threshold([0.5, 0.4], [1, 0], 0.9) == 0.0


@pytest.mark.parametrize("scores, labels", [
    ([0.1, 0.2], [1, 1]),
    ([0.1, 0.2], [0, 0]),
    ([0.1], [0, 1]),
    ([], []),
    ([0.1, 0.2], [0, 2]),
    ([0.1, float("nan")], [0, 1]),
])
def test_degenerate_inputs(scores, labels):
    with pytest.raises(MetricError):
        pr_auc(scores, labels)


# ---- attribution hit rate ----

def test_hit_rate_when_mass_sits_on_planted_cells():
    keys = [("s", 0), ("a", 0), ("b", 1), ("c", 2)]
    scores = [0.0, 0.5, 0.5, 0.0]
    assert attribution_hit_rate(scores, keys, {("a", 0), ("b", 1)}) == 1.0
    assert attribution_hit_rate(scores, keys, {("a", 0), ("c", 2)}) == 0.5


def test_hit_rate_under_uniform_attribution():
    keys = [(f"u{i}", 0) for i in range(20)]
    planted = {keys[3], keys[11]}
    rng = np.random.default_rng(0)
    rates = [attribution_hit_rate([0.05] * 20, keys, planted, top_k=2, rng=rng) for _ in range(4000)]
    assert np.mean(rates) == pytest.approx(0.1, abs=0.015)


def test_hit_rate_edge_cases():
    keys = [("a", 0), ("b", 0)]
    assert attribution_hit_rate([0.9, 0.1], keys, {("b", 0)}, top_k=2) == 1.0
    assert attribution_hit_rate([0.9, 0.1], keys, set()) is None
    with pytest.raises(MetricError):
        attribution_hit_rate([0.9], keys, {("b", 0)})
    with pytest.raises(MetricError):
        attribution_hit_rate([0.9, 0.1], keys, {("b", 0)}, top_k=0)


# ---- report ----

def test_evaluate_scores_uses_the_given_threshold():
    scores = [0.9, 0.8, 0.4, 0.3, 0.2]
    labels = [1, 0, 1, 0, 0]
    free = evaluate_scores(scores, labels)
    assert (free.f1, free.f1_threshold) == best_f1(scores, labels)
    fixed = evaluate_scores(scores, labels, threshold=0.85, hit_rates=[0.5, None, 1.0])
    assert fixed.f1 == pytest.approx(2 / 3)
    assert fixed.f1_threshold == 0.85
    assert fixed.attribution_hit_rate == 0.75
    assert (fixed.n_pos, fixed.n_neg) == (2, 3)
    assert set(fixed.to_dict()) >= {"pr_auc", "recall_at_fpr01", "fpr_at_recall09"}
    assert free.attribution_hit_rate is None
