"""AUROC, specificity-constrained MCC and global/local score aggregation.

Only labels and predicted probabilities ever leave an institution; global
scores are computed on their concatenation, never by averaging local scores.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import SchemaError

log = logging.getLogger(__name__)

MIN_SPECIFICITY = 0.75


@dataclass(frozen=True)
class PredictionSet:
    labels: np.ndarray
    probs: np.ndarray
    institution: str = ""

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=np.int64)
        p = np.asarray(self.probs, dtype=np.float64)
        if y.shape != p.shape or y.ndim != 1:
            raise SchemaError("labels and probabilities must be equal-length vectors")
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise SchemaError("probabilities must lie in [0, 1]")
        if not np.all((y == 0) | (y == 1)):
            raise SchemaError("labels must be 0 or 1")
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "probs", p)

    @staticmethod
    def concat(parts: Sequence["PredictionSet"], institution: str = "global") -> "PredictionSet":
        return PredictionSet(
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.probs for p in parts]),
            institution,
        )


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def auroc_scores(labels, scores) -> float:
    """Mann-Whitney AUROC; ties between a positive and a negative count 1/2."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SchemaError("AUROC needs both classes")
    ranks = rankdata(s)  # average ranks over ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc(preds: PredictionSet) -> float:
    return auroc_scores(preds.labels, preds.probs)


def confusion(preds: PredictionSet, threshold: float) -> ConfusionMatrix:
    """Positive prediction iff ``prob >= threshold``."""
    pred = preds.probs >= threshold
    y = preds.labels == 1
    return ConfusionMatrix(
        tp=int(np.count_nonzero(pred & y)),
        tn=int(np.count_nonzero(~pred & ~y)),
        fp=int(np.count_nonzero(pred & ~y)),
        fn=int(np.count_nonzero(~pred & y)),
    )


def specificity(preds: PredictionSet, threshold: float) -> float:
    cm = confusion(preds, threshold)
    return cm.tn / (cm.tn + cm.fp)


def threshold_at_specificity(preds: PredictionSet, min_specificity: float = MIN_SPECIFICITY) -> float:
    """Lowest candidate threshold whose specificity is strictly above the bound.

    Candidates are midpoints between consecutive distinct probabilities plus
    ``+inf``.  Lowering the threshold can only raise sensitivity, so the first
    admissible candidate from below is the most sensitive one.
    """
    neg = np.sort(preds.probs[preds.labels == 0])
    if neg.size == 0:
        raise SchemaError("specificity needs negative examples")
    uniq = np.unique(preds.probs)
    candidates = (uniq[:-1] + uniq[1:]) / 2.0
    # negatives predicted negative at threshold t: count of neg < t
    tn = np.searchsorted(neg, candidates, side="left")
    ok = np.flatnonzero(tn / neg.size > min_specificity)
    if ok.size == 0:
        return math.inf
    return float(candidates[ok[0]])


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation; 0 when any marginal is empty."""
    denom = (cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn)
    if denom == 0:
        return 0.0
    return (cm.tp * cm.tn - cm.fp * cm.fn) / math.sqrt(denom)


@dataclass(frozen=True)
class Score:
    auroc: float
    mcc: float
    threshold: float
    n: int


def score(preds: PredictionSet, min_specificity: float = MIN_SPECIFICITY) -> Score:
    """AUROC plus MCC at a threshold picked from these same predictions.

    A single-class set has no AUROC; it is reported as NaN with a warning.
    """
    has_both = 0 < int(preds.labels.sum()) < preds.labels.size
    if not has_both:
        log.warning("%s: single-class evaluation set, AUROC undefined", preds.institution or "predictions")
        a = math.nan
    else:
        a = auroc(preds)
    if np.any(preds.labels == 0):
        t = threshold_at_specificity(preds, min_specificity)
        m = mcc(confusion(preds, t))
    else:
        t, m = math.nan, math.nan
    return Score(a, m, t, int(preds.labels.size))


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error (ddof=1); SE is NaN for a single replicate."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), math.nan
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class MetricReport:
    institutions: list
    global_scores: list  # one Score per replicate
    local_scores: dict = field(default_factory=dict)  # institution -> [Score per replicate]

    def global_summary(self) -> dict:
        return _summary(self.global_scores)

    def local_summary(self) -> dict:
        return {k: _summary(v) for k, v in self.local_scores.items()}


def _summary(scores) -> dict:
    am, ase = mean_se([s.auroc for s in scores])
    mm, mse = mean_se([s.mcc for s in scores])
    return {"auroc_mean": am, "auroc_se": ase, "mcc_mean": mm, "mcc_se": mse}


def aggregate_scores(replicates: Sequence[Sequence[PredictionSet]], min_specificity: float = MIN_SPECIFICITY) -> MetricReport:
    """Global and local scores for each replicate (seed) of per-institution predictions."""
    if not replicates or not replicates[0]:
        raise SchemaError("need at least one institution")
    names = [p.institution for p in replicates[0]]
    report = MetricReport(names, [], {n: [] for n in names})
    for sets in replicates:
        if [p.institution for p in sets] != names:
            raise SchemaError("every replicate must cover the same institutions in order")
        report.global_scores.append(score(PredictionSet.concat(sets), min_specificity))
        for p in sets:
            report.local_scores[p.institution].append(score(p, min_specificity))
    return report
