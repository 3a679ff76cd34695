"""Evaluation metrics: CTR uplift, PR-AUC, ROC-AUC, relative cross entropy,
log loss, and ground-truth regret for synthetic environments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError, UsageError

CE_CLIP = 1e-15


@dataclass
class MetricsReport:
    """Final evaluation numbers of one experiment run."""

    cumulative_ctr: float
    ctr_uplift_pct: float
    random_policy_ctr: float
    train_pr_auc: float | None
    test_pr_auc: float | None
    roc_auc: float | None
    rce_pct: float | None
    log_loss: float | None
    ctr_series: list[float] = field(default_factory=list)
    regret_series: list[float] | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cumulative_ctr": self.cumulative_ctr,
            "ctr_uplift_pct": self.ctr_uplift_pct,
            "random_policy_ctr": self.random_policy_ctr,
            "train_pr_auc": self.train_pr_auc,
            "test_pr_auc": self.test_pr_auc,
            "roc_auc": self.roc_auc,
            "rce_pct": self.rce_pct,
            "log_loss": self.log_loss,
            "ctr_series": self.ctr_series,
            "regret_series": self.regret_series,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**data)


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise UsageError(f"scores/labels shapes {s.shape}/{y.shape} are inconsistent")
    if s.size == 0:
        raise UndefinedMetricError("metric undefined on an empty sample")
    if not np.isin(y, (0.0, 1.0)).all():
        raise UsageError("labels must be binary 0/1")
    return s, y


def ctr_uplift(model_ctr: float, random_ctr: float) -> float:
    """Percent CTR increase over the uniform-random serving baseline."""
    if random_ctr <= 0:
        raise UndefinedMetricError(f"random baseline CTR must be positive, got {random_ctr}")
    return 100.0 * (model_ctr / random_ctr - 1.0)


def pr_auc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Thresholds descend through distinct score values (ties grouped); each
    recall increment is weighted by the precision at the new operating point,
    with no interpolation between points.
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("PR-AUC undefined without positive examples")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    boundary = np.flatnonzero(np.append(np.diff(s_sorted) != 0, True))
    tp = np.cumsum(y_sorted)[boundary]
    count = boundary + 1.0
    recall = tp / n_pos
    precision = tp / count
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - recall_prev) * precision))


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    ties counted one half (Mann-Whitney statistic via average ranks)."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative")
    s_sorted = np.sort(s)
    first = np.searchsorted(s_sorted, s, side="left")
    last = np.searchsorted(s_sorted, s, side="right")
    ranks = 0.5 * (first + last + 1)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def log_loss(scores, labels) -> float:
    """Mean binary cross entropy with scores clipped away from {0, 1}."""
    s, y = _validate(scores, labels)
    p = np.clip(s, CE_CLIP, 1.0 - CE_CLIP)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


def rce(scores, labels) -> float:
    """Percent cross-entropy improvement over the constant prevalence
    predictor (the straw man); 100 is a perfect model, 0 matches the straw man."""
    s, y = _validate(scores, labels)
    rate = float(y.mean())
    if rate in (0.0, 1.0):
        raise UndefinedMetricError("RCE undefined when all labels are identical")
    ce_naive = log_loss(np.full(y.size, rate), y)
    ce_model = log_loss(s, y)
    return 100.0 * (ce_naive - ce_model) / ce_naive


def regret(impressions: Sequence, ground_truth_ctr: np.ndarray | None,
           oracle_topk: np.ndarray, user_ids: Sequence[str],
           ad_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Per-round and cumulative expected-CTR shortfall versus the
    ground-truth-optimal slate for each served user.

    Rounds are the distinct Impression.round values in serving order;
    oracle_topk holds the per-user optimal ad indices (env.oracle_topk).
    """
    if ground_truth_ctr is None:
        raise UsageError("regret requires a synthetic catalog with ground-truth CTRs")
    u_index = {u: i for i, u in enumerate(user_ids)}
    a_index = {a: i for i, a in enumerate(ad_ids)}
    by_round: dict[int, list] = {}
    for imp in impressions:
        by_round.setdefault(imp.round, []).append(imp)
    per_round = []
    for rnd in sorted(by_round):
        batch = by_round[rnd]
        ui = u_index[batch[0].user_id]
        served = sum(ground_truth_ctr[ui, a_index[imp.ad_id]] for imp in batch)
        oracle = float(ground_truth_ctr[ui, oracle_topk[ui][: len(batch)]].sum())
        per_round.append(oracle - served)
    per_round_arr = np.asarray(per_round, dtype=np.float64)
    return per_round_arr, np.cumsum(per_round_arr)


def cumulative_ctr_series(labels_by_round: Sequence[Sequence[int]]) -> list[float]:
    """Running clicks/impressions after each round."""
    clicks = 0
    shown = 0
    series = []
    for labels in labels_by_round:
        clicks += int(np.sum(labels))
        shown += len(labels)
        series.append(clicks / shown)
    return series
