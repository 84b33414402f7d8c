"""Multi-label evaluation metrics and analysis helpers.

Average precision is the area under the precision-recall curve evaluated
at every score threshold; AUC is the rank statistic with tie correction.
Also provides entropy-based hard-sample splitting and the Hungarian
concept-recovery oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata


class MetricsError(Exception):
    pass


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP = sum_n (R_n - R_{n-1}) * P_n over descending unique thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricsError("average_precision: no positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.float64)
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    # evaluate only at threshold boundaries (last index of each tied block)
    boundary = np.flatnonzero(np.diff(s) != 0)
    idx = np.concatenate([boundary, [len(s) - 1]])
    precision = tp[idx] / (tp[idx] + fp[idx])
    recall = tp[idx] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("roc_auc: need both positive and negative labels")
    ranks = rankdata(scores)
    return float(
        (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    )


@dataclass
class MultiLabelReport:
    mean_ap: float
    mean_auc: float
    per_class_ap: list
    per_class_auc: list
    skipped_classes: list = field(default_factory=list)


def multilabel_report(scores: np.ndarray, labels: np.ndarray) -> MultiLabelReport:
    """Per-class AP/AUC plus means; degenerate classes (all-positive or
    all-negative) are excluded from the means and reported by index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise MetricsError(
            f"scores {scores.shape} and labels {labels.shape} must be equal 2-d"
        )
    aps, aucs, skipped = [], [], []
    per_ap, per_auc = [], []
    for k in range(scores.shape[1]):
        n_pos = int(labels[:, k].sum())
        if n_pos == 0 or n_pos == labels.shape[0]:
            skipped.append(k)
            per_ap.append(float("nan"))
            per_auc.append(float("nan"))
            continue
        ap = average_precision(scores[:, k], labels[:, k])
        auc = roc_auc(scores[:, k], labels[:, k])
        per_ap.append(ap)
        per_auc.append(auc)
        aps.append(ap)
        aucs.append(auc)
    if not aps:
        raise MetricsError("all classes degenerate; no metrics computable")
    return MultiLabelReport(
        mean_ap=float(np.mean(aps)),
        mean_auc=float(np.mean(aucs)),
        per_class_ap=per_ap,
        per_class_auc=per_auc,
        skipped_classes=skipped,
    )


def thresholded_accuracy_sweep(
    scores: np.ndarray, labels: np.ndarray, thresholds=None
) -> dict:
    """Mean per-class accuracy at a sweep of decision thresholds
    (transparency companion to PR-curve AP)."""
    if thresholds is None:
        thresholds = np.arange(0.5, 0.951, 0.05)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return {
        round(float(t), 2): float(((scores >= t) == (labels == 1)).mean())
        for t in thresholds
    }


def bernoulli_entropy(p: np.ndarray) -> np.ndarray:
    """Elementwise entropy of Bernoulli(p) in nats."""
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return -(p * np.log(p) + (1.0 - p) * np.log(1.0 - p))


def hard_sample_split(class_probs: np.ndarray, percentile: float = 90.0):
    """Indices of samples at or above the entropy percentile.

    Uncertainty is the mean per-class Bernoulli entropy.  Returns
    (all_indices, hard_indices); ties broken by sample index (lower index
    kept first among the hard set, selection is by rank).
    """
    if not 0.0 < percentile < 100.0:
        raise MetricsError(f"percentile must be in (0, 100), got {percentile}")
    probs = np.asarray(class_probs, dtype=np.float64)
    uncertainty = bernoulli_entropy(probs).mean(axis=1)
    n = uncertainty.shape[0]
    n_keep = int(np.ceil(percentile / 100.0 * n))
    # stable descending sort: higher entropy first, index breaks ties
    order = np.lexsort((np.arange(n), -uncertainty))
    hard = np.sort(order[: n - n_keep])
    return np.arange(n), hard


@dataclass
class ConceptRecoveryReport:
    mean_matched_auc: float
    matching: list  # (head index, latent index, auc)
    auc_matrix: np.ndarray


def concept_recovery(
    concept_scores: np.ndarray, latent_concepts: np.ndarray
) -> ConceptRecoveryReport:
    """Optimal one-to-one assignment of concept heads to latent concepts
    maximizing summed AUC; extra heads stay unmatched."""
    scores = np.asarray(concept_scores, dtype=np.float64)
    latents = np.asarray(latent_concepts)
    n_heads, n_latent = scores.shape[1], latents.shape[1]
    matrix = np.full((n_heads, n_latent), 0.5)
    for t in range(n_latent):
        col = latents[:, t]
        if col.sum() == 0 or col.sum() == col.size:
            continue
        for h in range(n_heads):
            matrix[h, t] = roc_auc(scores[:, h], col)
    rows, cols = linear_sum_assignment(-matrix)
    matching = [(int(h), int(t), float(matrix[h, t])) for h, t in zip(rows, cols)]
    return ConceptRecoveryReport(
        mean_matched_auc=float(np.mean([m[2] for m in matching])),
        matching=matching,
        auc_matrix=matrix,
    )


def concept_recovery_null(
    latent_concepts: np.ndarray,
    n_heads: int,
    n_permutations: int = 50,
    seed: int = 0,
) -> float:
    """Permutation null for the matched-AUC statistic: random scores
    matched optimally against the same latents."""
    rng = np.random.default_rng(seed)
    latents = np.asarray(latent_concepts)
    values = []
    for _ in range(n_permutations):
        random_scores = rng.random((latents.shape[0], n_heads))
        values.append(concept_recovery(random_scores, latents).mean_matched_auc)
    return float(np.mean(values))
